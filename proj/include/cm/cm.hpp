#pragma once

#include "cm/types.hpp"
#include "cm/geometry.hpp"
#include "cm/dct.hpp"
#include "cm/cholesky.hpp"
#include "cm/predict.hpp"
#include "cm/quantile.hpp"
#include "cm/conformal.hpp"
#include "cm/ood.hpp"
#include "cm/pipeline.hpp"
#include "cm/io.hpp"
#include "cm/harness.hpp"
