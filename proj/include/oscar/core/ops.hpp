#pragma once

#include <cstdint>
#include <vector>

#include "oscar/core/autograd.hpp"

namespace oscar {

// ---- shape / movement ----
Var reshape(const Var& x, Shape s);
Var slice_axis(const Var& x, std::size_t axis, std::size_t start, std::size_t len);
Var concat_axis(const std::vector<Var>& xs, std::size_t axis);
Var permute_0213(const Var& x);  // (A,B,C,D) -> (A,C,B,D)
Var patchify(const Var& x, std::size_t patch);  // (B,C,H,W) -> (B,N,C*p*p)

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divv(const Var& a, const Var& b);
Var adds(const Var& a, Real c);
Var muls(const Var& a, Real c);
Var neg(const Var& a);
Var exp_v(const Var& a);
Var log_v(const Var& a);
Var sqrt_v(const Var& a);
Var square_v(const Var& a);
Var pow_scalar(const Var& a, Real p);  // requires positive values when p non-integer
Var sigmoid_v(const Var& a);
Var silu_v(const Var& a);
Var gelu_v(const Var& a);
Var relu_v(const Var& a);
Var softplus_v(const Var& a);
Var clamp_v(const Var& a, Real lo, Real hi);
Var dropout(const Var& a, Real p, Rng& rng);  // scales kept values by 1/(1-p)

// ---- broadcasting adds ----
Var add_broadcast_suffix(const Var& x, const Var& b);  // b.shape == trailing dims of x
Var add_channel_bias(const Var& x, const Var& b);      // x (B,C,H,W), b (B,C)

// ---- matmul ----
Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false);
Var bmm(const Var& a, const Var& b, bool ta = false, bool tb = false);  // (B,·,·) both

// ---- reductions ----
Var reduce_sum(const Var& x, std::size_t axis);
Var reduce_mean(const Var& x, std::size_t axis);
Var sum_all(const Var& x);   // -> shape {1}
Var mean_all(const Var& x);  // -> shape {1}

// ---- normalization / softmax ----
Var softmax_last(const Var& x);
Var normalize_sum_last(const Var& x);  // y = x / sum(x, last); caller guarantees sum > 0
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5);
Var group_norm4(const Var& x, std::size_t groups, const Var& gamma, const Var& beta,
                Real eps = 1e-5);

// ---- spatial ----
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride = 1,
           std::size_t pad = 0);
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);

// ---- lookup ----
Var embedding(const Var& table, const std::vector<std::int64_t>& ids, std::size_t batch,
              std::size_t seq_len);  // table (V,d) -> (batch,seq_len,d)

// plain-tensor helper shared with evaluation code (no gradient)
Tensor bilinear_resize_grid(const Tensor& grid, std::size_t in_h, std::size_t in_w,
                            std::size_t out_h, std::size_t out_w);  // (in_h*in_w, d) rows

inline Real value0(const Var& v) { return v->value.item(); }

}  // namespace oscar
