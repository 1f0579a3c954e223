#pragma once

// Umbrella header for the hierarchical cross-modal alignment library.

#include "decalign/align_hetero.hpp"
#include "decalign/align_homo.hpp"
#include "decalign/decouple.hpp"
#include "decalign/errors.hpp"
#include "decalign/gmm.hpp"
#include "decalign/io.hpp"
#include "decalign/linalg.hpp"
#include "decalign/mmot.hpp"
#include "decalign/model.hpp"
#include "decalign/rng.hpp"
#include "decalign/tensor.hpp"
#include "decalign/trainer.hpp"
