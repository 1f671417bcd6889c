#include "oscar/prompt/prompt.hpp"

#include <algorithm>
#include <numeric>

namespace oscar {

namespace {
constexpr const char* kTemplateBare = "Electro-Optical Image";
constexpr const char* kTemplateOpen = "Electro-Optical Image of [";
// vocabulary ids
constexpr std::int64_t kPad = 0;
constexpr std::int64_t kNull = 1;
constexpr std::int64_t kWordElectroOptical = 2;
constexpr std::int64_t kWordImage = 3;
constexpr std::int64_t kWordOf = 4;
constexpr std::int64_t kClassBase = 5;
}  // namespace

PromptSpec build_prompt(const std::vector<Real>& probs, Real tau, std::size_t k,
                        const std::vector<std::string>& class_names) {
    if (k < 1) throw ConfigError("build_prompt: k must be at least 1");
    if (probs.size() != class_names.size())
        throw ShapeError("build_prompt: probs and class_names sizes differ");
    for (Real p : probs)
        if (p < 0.0 || p > 1.0)
            throw ValidationError("build_prompt: probabilities outside [0,1]");

    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;  // ties: lower class index first
    });

    PromptSpec spec;
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i)
        if (probs[order[i]] > tau) spec.active_classes.push_back(order[i]);

    if (spec.active_classes.empty()) {
        spec.text = kTemplateBare;
        return spec;
    }
    spec.text = std::string(kTemplateOpen);
    for (std::size_t i = 0; i < spec.active_classes.size(); ++i) {
        if (i) spec.text += ", ";
        spec.text += class_names[spec.active_classes[i]];
    }
    spec.text += "]";
    return spec;
}

PromptSpec null_prompt() {
    PromptSpec spec;
    spec.is_null = true;
    spec.text = "";
    return spec;
}

std::vector<std::size_t> parse_prompt(const std::string& text,
                                      const std::vector<std::string>& class_names) {
    if (text == kTemplateBare) return {};
    const std::string open = kTemplateOpen;
    if (text.rfind(open, 0) != 0 || text.empty() || text.back() != ']')
        throw ValidationError("parse_prompt: text does not follow the template");
    std::string inner = text.substr(open.size(), text.size() - open.size() - 1);
    std::vector<std::size_t> ids;
    std::size_t pos = 0;
    while (pos <= inner.size()) {
        std::size_t comma = inner.find(", ", pos);
        std::string name =
            inner.substr(pos, comma == std::string::npos ? std::string::npos
                                                         : comma - pos);
        auto it = std::find(class_names.begin(), class_names.end(), name);
        if (it == class_names.end())
            throw ValidationError("parse_prompt: unknown class name '" + name + "'");
        ids.push_back(static_cast<std::size_t>(it - class_names.begin()));
        if (comma == std::string::npos) break;
        pos = comma + 2;
    }
    return ids;
}

PromptSpec cfg_drop(const PromptSpec& spec, Real p_drop, Rng& rng) {
    if (p_drop < 0.0 || p_drop > 1.0)
        throw ConfigError("cfg_drop: probability outside [0,1]");
    return rng.bernoulli(p_drop) ? null_prompt() : spec;
}

PromptSpec cfg_drop(const PromptSpec& spec, Real p_drop, std::uint64_t seed) {
    Rng rng(seed);
    return cfg_drop(spec, p_drop, rng);
}

PromptEmbedder::PromptEmbedder(ParamStore& ps, const std::string& name,
                               std::vector<std::string> class_names, std::size_t dim,
                               Rng& rng)
    : class_names_(std::move(class_names)), dim_(dim) {
    std::size_t V = static_cast<std::size_t>(kClassBase) + class_names_.size();
    table_ = ps.add(name + ".table", init_normal({V, dim}, 0.02, rng), true);
}

std::size_t PromptEmbedder::vocab_size() const {
    return static_cast<std::size_t>(kClassBase) + class_names_.size();
}

std::vector<std::int64_t> PromptEmbedder::token_ids(const PromptSpec& spec) const {
    std::vector<std::int64_t> ids;
    if (spec.is_null) {
        ids.assign(kPromptSeqLen, kNull);
        return ids;
    }
    ids = {kWordElectroOptical, kWordImage};
    if (!spec.active_classes.empty()) {
        ids.push_back(kWordOf);
        for (std::size_t c : spec.active_classes) {
            if (c >= class_names_.size())
                throw ValidationError("PromptEmbedder: class id outside vocabulary");
            ids.push_back(kClassBase + static_cast<std::int64_t>(c));
        }
    }
    if (ids.size() > kPromptSeqLen) ids.resize(kPromptSeqLen);
    while (ids.size() < kPromptSeqLen) ids.push_back(kPad);
    return ids;
}

Var PromptEmbedder::embed(const PromptSpec& spec) const {
    return embedding(table_, token_ids(spec), 1, kPromptSeqLen);
}

Var PromptEmbedder::embed_batch(const std::vector<PromptSpec>& specs) const {
    if (specs.empty()) throw ValidationError("embed_batch: empty prompt list");
    std::vector<std::int64_t> ids;
    ids.reserve(specs.size() * kPromptSeqLen);
    for (const auto& s : specs) {
        auto one = token_ids(s);
        ids.insert(ids.end(), one.begin(), one.end());
    }
    return embedding(table_, ids, specs.size(), kPromptSeqLen);
}

}  // namespace oscar
