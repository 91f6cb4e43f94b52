#pragma once

#include "ccr/training.hpp"

// A training setup small enough for unit tests: 8×8 images and a
// two-conv stack, same layer kinds as the canonical one.
inline ccr::TrainConfig small_config(std::size_t epochs = 3) {
    using K = ccr::LayerSpec::Kind;
    ccr::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.image_size = 8;
    cfg.embed_dim = 6;
    cfg.cat_embed = 2;
    cfg.fc_hidden = 16;
    cfg.seed = 5;
    cfg.stack = {{K::conv, "C1", 3, 6, 1, 1},
                 {K::maxpool, "P2", 2, 0, 2, 0},
                 {K::conv, "C3", 3, 8, 1, 1},
                 {K::maxpool, "P4", 2, 0, 2, 0}};
    return cfg;
}
