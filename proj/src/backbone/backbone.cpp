#include "oscar/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "oscar/core/hash.hpp"

namespace oscar {

void EncoderConfig::validate() const {
    if (depth == 0 || embed_dim == 0 || heads == 0 || patch_size == 0 ||
        num_classes == 0 || lora_rank == 0)
        throw ConfigError("EncoderConfig: all structural sizes must be positive");
    if (embed_dim % heads != 0)
        throw ConfigError("EncoderConfig: embed_dim must divide evenly into heads");
    if (embed_dim % 4 != 0)
        throw ConfigError("EncoderConfig: embed_dim must be divisible by 4 for the 2-D position table");
    if (lora_dropout < 0.0 || lora_dropout >= 1.0)
        throw ConfigError("EncoderConfig: lora_dropout must be in [0,1)");
    if (aligned_layers.empty())
        throw ConfigError("EncoderConfig: aligned_layers must be non-empty");
    for (auto l : aligned_layers)
        if (l >= depth) throw ConfigError("EncoderConfig: aligned layer index out of range");
    if (hier_layers.size() != 4)
        throw ConfigError("EncoderConfig: hier_layers must select exactly four layers");
    std::set<std::size_t> aligned(aligned_layers.begin(), aligned_layers.end());
    if (aligned.size() != aligned_layers.size())
        throw ConfigError("EncoderConfig: aligned_layers must be distinct");
    for (auto l : hier_layers) {
        if (l >= depth) throw ConfigError("EncoderConfig: hier layer index out of range");
        if (!aligned.count(l))
            throw ConfigError("EncoderConfig: hier_layers must be a subset of aligned_layers");
    }
}

Json encoder_config_to_json(const EncoderConfig& c) {
    return Json{{"depth", c.depth},
                {"embed_dim", c.embed_dim},
                {"heads", c.heads},
                {"patch_size", c.patch_size},
                {"num_classes", c.num_classes},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"lora_dropout", c.lora_dropout},
                {"aligned_layers", c.aligned_layers},
                {"hier_layers", c.hier_layers}};
}

EncoderConfig encoder_config_from_json(const Json& j) {
    static const std::set<std::string> known = {
        "depth",     "embed_dim",  "heads",        "patch_size",     "num_classes",
        "lora_rank", "lora_alpha", "lora_dropout", "aligned_layers", "hier_layers"};
    for (auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("encoder config: unknown key '" + key + "'");
    EncoderConfig c;
    if (j.contains("depth")) c.depth = j.at("depth").get<std::size_t>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("heads")) c.heads = j.at("heads").get<std::size_t>();
    if (j.contains("patch_size")) c.patch_size = j.at("patch_size").get<std::size_t>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("lora_rank")) c.lora_rank = j.at("lora_rank").get<std::size_t>();
    if (j.contains("lora_alpha")) c.lora_alpha = j.at("lora_alpha").get<Real>();
    if (j.contains("lora_dropout")) c.lora_dropout = j.at("lora_dropout").get<Real>();
    if (j.contains("aligned_layers"))
        c.aligned_layers = j.at("aligned_layers").get<std::vector<std::size_t>>();
    if (j.contains("hier_layers"))
        c.hier_layers = j.at("hier_layers").get<std::vector<std::size_t>>();
    c.validate();
    return c;
}

Var lora_forward(const Var& base_W, const Var& input, const Var& A, const Var& B,
                 std::size_t r, Real alpha) {
    if (base_W->value.ndim() != 2 || input->value.ndim() != 1)
        throw ShapeError("lora_forward: expects a weight matrix and an input vector");
    if (A->value.ndim() != 2 || A->value.dim(0) != r ||
        A->value.dim(1) != base_W->value.dim(1))
        throw ShapeError("lora_forward: A must be (r, in)");
    if (B->value.ndim() != 2 || B->value.dim(0) != base_W->value.dim(0) ||
        B->value.dim(1) != r)
        throw ShapeError("lora_forward: B must be (out, r)");
    std::size_t in = input->value.dim(0);
    Var x2 = reshape(input, {1, in});
    Var base = matmul(x2, base_W, false, true);
    Var low = matmul(matmul(x2, A, false, true), B, false, true);
    Var out = add(base, muls(low, alpha / static_cast<Real>(r)));
    return reshape(out, {base_W->value.dim(0)});
}

LoraLinear::LoraLinear(ParamStore& ps, const std::string& name, std::size_t in,
                       std::size_t out, std::size_t r, Real alpha, Real drop, Rng& rng)
    : base(ps, name + ".base", in, out, rng, true, 0.02, /*trainable=*/false),
      scale(alpha / static_cast<Real>(r)),
      drop_p(drop) {
    A = ps.add(name + ".lora_A", init_normal({r, in}, 0.02, rng), true);
    B = ps.add(name + ".lora_B", Tensor::zeros({out, r}), true);
}

Var LoraLinear::tokens(const Var& x, bool train, Rng* rng) const {
    const Shape& s = x->value.shape();
    if (s.size() != 3) throw ShapeError("LoraLinear::tokens expects (B,T,in)");
    std::size_t Bn = s[0], T = s[1], in = s[2];
    Var flat = reshape(x, {Bn * T, in});
    Var ax = flat;
    if (train && drop_p > 0.0) {
        if (!rng) throw ConfigError("LoraLinear: train mode requires an RNG for dropout");
        ax = dropout(ax, drop_p, *rng);
    }
    Var low = matmul(matmul(ax, A, false, true), B, false, true);
    Var out = add(matmul(flat, base.W, false, true), muls(low, scale));
    out = add_broadcast_suffix(out, base.b);
    return reshape(out, {Bn, T, base.W->value.dim(0)});
}

Tensor LoraLinear::merged_weight() const {
    std::size_t out = base.W->value.dim(0), in = base.W->value.dim(1);
    std::size_t r = A->value.dim(0);
    Tensor merged = base.W->value;
    EMap m = merged.mat(out, in);
    m.noalias() += scale * (B->value.mat(out, r) * A->value.mat(r, in));
    return merged;
}

Tensor sincos_position_table(std::size_t h_p, std::size_t w_p, std::size_t d) {
    if (d % 4 != 0) throw ConfigError("position table: dim must be divisible by 4");
    std::size_t N = h_p * w_p, quarter = d / 4;
    Tensor table({N + 1, d});  // row 0 stays zero for CLS
    for (std::size_t py = 0; py < h_p; ++py)
        for (std::size_t px = 0; px < w_p; ++px) {
            Real* row = table.data() + (1 + py * w_p + px) * d;
            for (std::size_t i = 0; i < quarter; ++i) {
                Real omega = std::pow(10000.0, -static_cast<Real>(i) /
                                                   static_cast<Real>(quarter));
                row[2 * i] = std::sin(static_cast<Real>(py) * omega);
                row[2 * i + 1] = std::cos(static_cast<Real>(py) * omega);
                row[d / 2 + 2 * i] = std::sin(static_cast<Real>(px) * omega);
                row[d / 2 + 2 * i + 1] = std::cos(static_cast<Real>(px) * omega);
            }
        }
    return table;
}

Encoder::Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    std::size_t d = cfg_.embed_dim, p = cfg_.patch_size;
    patch_embed_ = Linear(ps_, "patch_embed", 3 * p * p, d, rng, true, 0.02,
                          /*trainable=*/false);
    cls_token_ = ps_.add("cls_token", init_normal({1, d}, 0.02, rng), false);
    blocks_.resize(cfg_.depth);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
        std::string base = "blocks." + std::to_string(l);
        Block& blk = blocks_[l];
        blk.ln1 = LayerNormM(ps_, base + ".ln1", d, false);
        blk.q = LoraLinear(ps_, base + ".attn.q", d, d, cfg_.lora_rank, cfg_.lora_alpha,
                           cfg_.lora_dropout, rng);
        blk.k = LoraLinear(ps_, base + ".attn.k", d, d, cfg_.lora_rank, cfg_.lora_alpha,
                           cfg_.lora_dropout, rng);
        blk.v = LoraLinear(ps_, base + ".attn.v", d, d, cfg_.lora_rank, cfg_.lora_alpha,
                           cfg_.lora_dropout, rng);
        blk.o = LoraLinear(ps_, base + ".attn.o", d, d, cfg_.lora_rank, cfg_.lora_alpha,
                           cfg_.lora_dropout, rng);
        blk.ln2 = LayerNormM(ps_, base + ".ln2", d, false);
        blk.fc1 = Linear(ps_, base + ".mlp.fc1", d, 2 * d, rng, true, 0.02, false);
        blk.fc2 = Linear(ps_, base + ".mlp.fc2", 2 * d, d, rng, true, 0.02, false);
    }
    ln_f_ = LayerNormM(ps_, "ln_f", d, false);
    head_ = Linear(ps_, "head", d, cfg_.num_classes, rng, true, 0.02, /*trainable=*/true);
}

FeatureBundle Encoder::encode(const Var& image, bool train, Rng* rng) const {
    const Shape& s = image->value.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("encode: expects image (B,3,H,W)");
    std::size_t Bn = s[0], H = s[2], W = s[3], p = cfg_.patch_size;
    if (H % p != 0 || W % p != 0)
        throw ShapeError("encode: image size must be divisible by patch_size");
    if (train && !rng) throw ConfigError("encode: train mode requires an RNG");

    std::size_t d = cfg_.embed_dim, h = cfg_.heads, dh = d / h;
    std::size_t N = (H / p) * (W / p), T = N + 1;
    std::set<std::size_t> aligned(cfg_.aligned_layers.begin(), cfg_.aligned_layers.end());

    Var x = patch_embed_.tokens(patchify(image, p));  // (B,N,d)
    Var cls_row = add_broadcast_suffix(constant(Tensor::zeros({Bn, 1, d})), cls_token_);
    x = concat_axis({cls_row, x}, 1);  // (B,T,d)
    x = add_broadcast_suffix(x, constant(sincos_position_table(H / p, W / p, d)));

    FeatureBundle bundle;
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
        const Block& blk = blocks_[l];
        Var hx = blk.ln1.forward(x);
        auto split = [&](const Var& t) {
            return reshape(permute_0213(reshape(t, {Bn, T, h, dh})), {Bn * h, T, dh});
        };
        Var qh = split(blk.q.tokens(hx, train, rng));
        Var kh = split(blk.k.tokens(hx, train, rng));
        Var vh = split(blk.v.tokens(hx, train, rng));
        Var probs = softmax_last(muls(bmm(qh, kh, false, true), 1.0 / std::sqrt(Real(dh))));
        Var ctx = reshape(permute_0213(reshape(bmm(probs, vh), {Bn, h, T, dh})), {Bn, T, d});
        x = add(x, blk.o.tokens(ctx, train, rng));
        Var m = blk.ln2.forward(x);
        x = add(x, blk.fc2.tokens(gelu_v(blk.fc1.tokens(m))));

        if (aligned.count(l)) {
            Var p4 = reshape(probs, {Bn, h, T, T});
            Var row = slice_axis(slice_axis(p4, 2, 0, 1), 3, 1, N);  // (B,h,1,N)
            Var avg = reshape(reduce_mean(row, 1), {Bn, N});
            bundle.attn_per_layer[l] = normalize_sum_last(avg);
            bundle.cls_per_layer[l] = reshape(slice_axis(x, 1, 0, 1), {Bn, d});
            bundle.patch_per_layer[l] = slice_axis(x, 1, 1, N);
        }
    }
    Var xf = ln_f_.forward(x);
    bundle.logits = head_.rows(reshape(slice_axis(xf, 1, 0, 1), {Bn, d}));
    return bundle;
}

Var classify(const FeatureBundle& bundle) {
    if (!bundle.logits) throw ValidationError("classify: bundle has no logits");
    return sigmoid_v(bundle.logits);
}

void save_encoder_checkpoint(const std::string& dir, const Encoder& enc,
                             std::size_t step, const Json& extra) {
    ensure_dir(dir);
    auto bytes = enc.params().serialize();
    atomic_write_bytes(dir + "/params.bin", bytes);
    Json manifest{{"schema_version", 1},
                  {"kind", "encoder_checkpoint"},
                  {"config", encoder_config_to_json(enc.config())},
                  {"step", step},
                  {"params_sha256", sha256_hex(bytes)}};
    for (auto& [key, val] : extra.items()) manifest[key] = val;
    write_json(dir + "/manifest.json", manifest);
}

Json read_checkpoint_manifest(const std::string& dir) {
    std::string path = dir + "/manifest.json";
    if (!file_exists(path)) throw ArtifactError("checkpoint manifest missing: " + path);
    return read_json(path);
}

Encoder load_encoder_checkpoint(const std::string& dir) {
    Json manifest = read_checkpoint_manifest(dir);
    if (manifest.value("kind", "") != "encoder_checkpoint")
        throw ArtifactError("not an encoder checkpoint: " + dir);
    EncoderConfig cfg;
    try {
        cfg = encoder_config_from_json(manifest.at("config"));
    } catch (const ConfigError& e) {
        throw ArtifactError(std::string("checkpoint config invalid: ") + e.what());
    }
    Encoder enc(cfg, 0);
    auto bytes = read_file_bytes(dir + "/params.bin");
    std::string want = manifest.value("params_sha256", "");
    if (sha256_hex(bytes) != want)
        throw ArtifactError("checkpoint parameter checksum mismatch in " + dir);
    enc.params().deserialize(bytes);
    return enc;
}

}  // namespace oscar
