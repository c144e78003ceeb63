#pragma once

#include "milr/binary_io.hpp"
#include "milr/configs.hpp"
#include "milr/crc_grid.hpp"
#include "milr/datasets.hpp"
#include "milr/errors.hpp"
#include "milr/experiment.hpp"
#include "milr/fault_injector.hpp"
#include "milr/linalg.hpp"
#include "milr/milr_engine.hpp"
#include "milr/network.hpp"
#include "milr/rng.hpp"
#include "milr/secded.hpp"
#include "milr/sidecar_io.hpp"
#include "milr/tensor.hpp"
#include "milr/weights_io.hpp"
