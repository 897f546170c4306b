#pragma once

#include "rdarts/biometric.hpp"
#include "rdarts/cell_graph.hpp"
#include "rdarts/checkpoint.hpp"
#include "rdarts/data.hpp"
#include "rdarts/drop_path.hpp"
#include "rdarts/errors.hpp"
#include "rdarts/modules.hpp"
#include "rdarts/op_vocabulary.hpp"
#include "rdarts/ops.hpp"
#include "rdarts/optim.hpp"
#include "rdarts/random.hpp"
#include "rdarts/search.hpp"
#include "rdarts/supernet.hpp"
#include "rdarts/tensor.hpp"
#include "rdarts/trainer.hpp"
