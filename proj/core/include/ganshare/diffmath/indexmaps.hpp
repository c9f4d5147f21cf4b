#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "ganshare/diffmath/tensor.hpp"

namespace ganshare::diffmath::ix {

using IndexMap = std::shared_ptr<const std::vector<int64_t>>;

// All builders return, for every output linear position, the input linear
// position it reads. Paired with gather() they form differentiable layout ops.

// out_shape = in_shape permuted by `perm` (out axis i comes from in axis perm[i]).
IndexMap permute(const Shape& in_shape, const std::vector<int>& perm, Shape& out_shape);

// Cyclic 2-D shift of a (N,H,W,C) view: out[n,y,x,c] = in[n,(y+sy) mod H,(x+sx) mod W,c].
IndexMap roll2d(int64_t n, int64_t h, int64_t w, int64_t c, int sy, int sx);

// (N,H,W,C) -> (N*nWh*nWw, win*win, C) non-overlapping square windows.
IndexMap window_partition(int64_t n, int64_t h, int64_t w, int64_t c, int win, Shape& out_shape);

// inverse of window_partition
IndexMap window_reverse(int64_t n, int64_t h, int64_t w, int64_t c, int win, Shape& out_shape);

// (N,H,W,C) -> (N, H/2*W/2, 4C); 2x2 neighbourhood concatenated along channels
// in the order (0,0),(1,0),(0,1),(1,1) of (row,col) offsets.
IndexMap merge2x2(int64_t n, int64_t h, int64_t w, int64_t c, Shape& out_shape);

// slice along the last axis: out[..., j] = in[..., start+j]
IndexMap slice_last(const Shape& in_shape, int64_t start, int64_t len, Shape& out_shape);

}  // namespace ganshare::diffmath::ix
