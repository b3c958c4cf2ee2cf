#pragma once

#include "partseg/autodiff.hpp"
#include "partseg/data.hpp"
#include "partseg/encoders.hpp"
#include "partseg/errors.hpp"
#include "partseg/image.hpp"
#include "partseg/losses.hpp"
#include "partseg/model.hpp"
#include "partseg/plot.hpp"
#include "partseg/prompt.hpp"
#include "partseg/prototypes.hpp"
#include "partseg/rng.hpp"
#include "partseg/trainer.hpp"
