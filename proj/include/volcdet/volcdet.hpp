#pragma once

#include "volcdet/cnn.hpp"
#include "volcdet/error.hpp"
#include "volcdet/evalkit.hpp"
#include "volcdet/gradcheck.hpp"
#include "volcdet/image.hpp"
#include "volcdet/manifest.hpp"
#include "volcdet/merger.hpp"
#include "volcdet/model_io.hpp"
#include "volcdet/pipeline.hpp"
#include "volcdet/raster.hpp"
#include "volcdet/synthgen.hpp"
#include "volcdet/texture.hpp"
#include "volcdet/tiler.hpp"
