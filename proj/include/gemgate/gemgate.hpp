#pragma once

#include "gemgate/csv.hpp"
#include "gemgate/data.hpp"
#include "gemgate/diff.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/experiments.hpp"
#include "gemgate/fusion.hpp"
#include "gemgate/gmm.hpp"
#include "gemgate/knowledge.hpp"
#include "gemgate/linalg.hpp"
#include "gemgate/objectives.hpp"
#include "gemgate/ood.hpp"
#include "gemgate/rng.hpp"
#include "gemgate/synthetic.hpp"
#include "gemgate/trainer.hpp"
