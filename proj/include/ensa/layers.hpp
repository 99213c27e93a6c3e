#pragma once

#include "ensa/graph.hpp"

#include <random>
#include <string>

namespace ensa {

using Rng = std::mt19937_64;

// N(0, 1/fan_in) entries.
Matrix random_weight(Index fan_in, Index fan_out, Rng& rng);

// Registers `{prefix}.w1/.b1/.w2/.b2` for in -> hidden -> out.
void add_mlp2_params(ParamStore& store, const std::string& prefix, Index in, Index hidden,
                     Index out, Rng& rng);

// x W + b with W = store[w], b = store[b] (1 x out).
Var dense(Graph& g, ParamStore& store, Var x, const std::string& w, const std::string& b);

// gelu(x W1 + b1) W2 + b2.
Var mlp2(Graph& g, ParamStore& store, Var x, const std::string& prefix);

}  // namespace ensa
