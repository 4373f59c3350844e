#pragma once

#include <string>
#include <utility>
#include <vector>

#include "utrack/param_store.hpp"
#include "utrack/tape.hpp"

namespace utrack {

struct EncoderConfig {
    std::size_t patch = 16;   // patch side S
    std::size_t width = 64;   // token width d
    std::size_t layers = 4;   // stacked mixed-attention blocks
    std::size_t heads = 2;
    std::size_t ff_multiplier = 4;
    std::size_t template_size = 32;
    std::size_t search_size = 64;

    void validate() const;
    std::size_t template_grid() const { return template_size / patch; }
    std::size_t search_grid() const { return search_size / patch; }
    std::size_t template_tokens() const { return template_grid() * template_grid(); }
    std::size_t search_tokens() const { return search_grid() * search_grid(); }
};

enum class TokenOrigin { kTemplate, kSearch };

// Tokens in flight on a tape, with the patch grid they came from.
struct TokenSet {
    Var tokens;  // [n_tok x d]
    TokenOrigin origin = TokenOrigin::kTemplate;
    std::size_t rows = 0, cols = 0;
};

struct EncodedPair {
    Var template_feat;  // [d x rows_t x cols_t]
    Var search_feat;    // [d x rows_s x cols_s]
    std::size_t template_grid = 0, search_grid = 0;
};

// Optional capture of the attention weight matrices, one [n_q x n_kv] per
// head per stream, for inspection in tests.
struct AttentionProbe {
    std::vector<Var> template_weights;
    std::vector<Var> search_weights;
};

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng);

// Flattens an image into patch tokens, projects them to width d and adds the
// stream's positional table.
TokenSet patchify_embed(Tape& t, Var image, TokenOrigin origin, const EncoderConfig& cfg,
                        ParamVars& params);

// One block: joint key/value attention over the concatenated streams, then a
// feed-forward, both pre-normalized with residual connections.
std::pair<TokenSet, TokenSet> mixed_attention_layer(Tape& t, const TokenSet& tmpl,
                                                    const TokenSet& search,
                                                    const EncoderConfig& cfg, ParamVars& params,
                                                    std::size_t layer_index,
                                                    AttentionProbe* probe = nullptr);

// Full backbone: embed both streams, run every layer, reshape the tokens
// back onto their patch grids as channel-first feature maps.
EncodedPair encode(Tape& t, Var template_image, Var search_image, const EncoderConfig& cfg,
                   ParamVars& params);

}  // namespace utrack
