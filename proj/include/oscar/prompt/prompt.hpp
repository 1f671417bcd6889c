#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oscar/core/nn.hpp"

namespace oscar {

// A class-aware conditioning prompt derived from student predictions.
struct PromptSpec {
    std::vector<std::size_t> active_classes;  // ordered by descending probability
    std::string text;
    bool is_null = false;

    bool operator==(const PromptSpec& o) const {
        return active_classes == o.active_classes && text == o.text &&
               is_null == o.is_null;
    }
};

inline constexpr std::size_t kPromptSeqLen = 8;

// Top-k by probability, then keep entries above tau (strict), descending
// probability with lower class index breaking ties. Renders
// "Electro-Optical Image of [c1, c2]"; empty selection falls back to
// "Electro-Optical Image".
PromptSpec build_prompt(const std::vector<Real>& probs, Real tau, std::size_t k,
                        const std::vector<std::string>& class_names);

PromptSpec null_prompt();

// Inverse of the renderer: recovers active class ids from prompt text.
std::vector<std::size_t> parse_prompt(const std::string& text,
                                      const std::vector<std::string>& class_names);

// With probability p_drop replaces the prompt with the null prompt (training-time
// classifier-free-guidance conditioning dropout).
PromptSpec cfg_drop(const PromptSpec& spec, Real p_drop, Rng& rng);
PromptSpec cfg_drop(const PromptSpec& spec, Real p_drop, std::uint64_t seed);

// Learned token-embedding table standing in for a text encoder. Vocabulary:
// 0 = PAD, 1 = NULL, 2.. = template words, then one token per class name.
class PromptEmbedder {
  public:
    PromptEmbedder() = default;
    PromptEmbedder(ParamStore& ps, const std::string& name,
                   std::vector<std::string> class_names, std::size_t dim, Rng& rng);

    // Fixed-length token ids (pad/truncate to kPromptSeqLen).
    std::vector<std::int64_t> token_ids(const PromptSpec& spec) const;
    Var embed(const PromptSpec& spec) const;                      // (1, 8, dim)
    Var embed_batch(const std::vector<PromptSpec>& specs) const;  // (B, 8, dim)

    std::size_t dim() const { return dim_; }
    std::size_t vocab_size() const;
    const Var& table() const { return table_; }

  private:
    std::vector<std::string> class_names_;
    std::size_t dim_ = 0;
    Var table_;  // (V, dim)
};

}  // namespace oscar
