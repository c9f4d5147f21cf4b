#include "ganshare/diffmath/indexmaps.hpp"

namespace ganshare::diffmath::ix {

namespace {
std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}
}  // namespace

IndexMap permute(const Shape& in_shape, const std::vector<int>& perm, Shape& out_shape) {
  if (perm.size() != in_shape.size()) throw ShapeError("permute: rank mismatch");
  out_shape.resize(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  auto in_st = strides_of(in_shape);
  auto out_st = strides_of(out_shape);
  auto idx = std::make_shared<std::vector<int64_t>>(numel(out_shape));
  const int rank = static_cast<int>(perm.size());
  for (int64_t i = 0; i < numel(out_shape); ++i) {
    int64_t rem = i, src = 0;
    for (int d = 0; d < rank; ++d) {
      int64_t c = rem / out_st[d];
      rem -= c * out_st[d];
      src += c * in_st[perm[d]];
    }
    (*idx)[i] = src;
  }
  return idx;
}

IndexMap roll2d(int64_t n, int64_t h, int64_t w, int64_t c, int sy, int sx) {
  auto idx = std::make_shared<std::vector<int64_t>>(n * h * w * c);
  int64_t i = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy_ = ((y + sy) % h + h) % h;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sx_ = ((x + sx) % w + w) % w;
        const int64_t base = ((b * h + sy_) * w + sx_) * c;
        for (int64_t ch = 0; ch < c; ++ch) (*idx)[i++] = base + ch;
      }
    }
  return idx;
}

IndexMap window_partition(int64_t n, int64_t h, int64_t w, int64_t c, int win, Shape& out_shape) {
  if (h % win != 0 || w % win != 0)
    throw ShapeError("window_partition: grid " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by window " + std::to_string(win));
  const int64_t nwh = h / win, nww = w / win;
  out_shape = {n * nwh * nww, static_cast<int64_t>(win) * win, c};
  auto idx = std::make_shared<std::vector<int64_t>>(numel(out_shape));
  int64_t i = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t wy = 0; wy < nwh; ++wy)
      for (int64_t wx = 0; wx < nww; ++wx)
        for (int64_t iy = 0; iy < win; ++iy)
          for (int64_t ixp = 0; ixp < win; ++ixp) {
            const int64_t y = wy * win + iy, x = wx * win + ixp;
            const int64_t base = ((b * h + y) * w + x) * c;
            for (int64_t ch = 0; ch < c; ++ch) (*idx)[i++] = base + ch;
          }
  return idx;
}

IndexMap window_reverse(int64_t n, int64_t h, int64_t w, int64_t c, int win, Shape& out_shape) {
  const int64_t nwh = h / win, nww = w / win;
  out_shape = {n, h, w, c};
  auto idx = std::make_shared<std::vector<int64_t>>(numel(out_shape));
  int64_t i = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t wy = y / win, wx = x / win, iy = y % win, ixp = x % win;
        const int64_t wi = (b * nwh + wy) * nww + wx;
        const int64_t base = (wi * win * win + iy * win + ixp) * c;
        for (int64_t ch = 0; ch < c; ++ch) (*idx)[i++] = base + ch;
      }
  return idx;
}

IndexMap merge2x2(int64_t n, int64_t h, int64_t w, int64_t c, Shape& out_shape) {
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("merge2x2: odd grid");
  const int64_t oh = h / 2, ow = w / 2;
  out_shape = {n, oh * ow, 4 * c};
  auto idx = std::make_shared<std::vector<int64_t>>(numel(out_shape));
  // channel-group order: (0,0), (1,0), (0,1), (1,1) of (row, col) offsets
  const int64_t offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  int64_t i = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x)
        for (const auto& o : offs) {
          const int64_t base = ((b * h + 2 * y + o[0]) * w + 2 * x + o[1]) * c;
          for (int64_t ch = 0; ch < c; ++ch) (*idx)[i++] = base + ch;
        }
  return idx;
}

IndexMap slice_last(const Shape& in_shape, int64_t start, int64_t len, Shape& out_shape) {
  const int64_t last = in_shape.back();
  if (start < 0 || start + len > last) throw ShapeError("slice_last: out of range");
  out_shape = in_shape;
  out_shape.back() = len;
  const int64_t rows = numel(in_shape) / last;
  auto idx = std::make_shared<std::vector<int64_t>>(rows * len);
  int64_t i = 0;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < len; ++j) (*idx)[i++] = r * last + start + j;
  return idx;
}

}  // namespace ganshare::diffmath::ix
