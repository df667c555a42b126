#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/tensor.hpp"

namespace isae {

inline constexpr int kImageH = 32;
inline constexpr int kImageW = 32;
inline constexpr int kImageC = 3;
inline constexpr int kNumParts = 5;

inline const std::array<const char*, kNumParts> kPartNames = {
    "bg_hair", "face", "eyebrows", "eyes", "mouth"};

// How the latent vector is carved into per-part subspaces. The default splits
// d=32 as (12,8,4,4,4) across (bg_hair, face, eyebrows, eyes, mouth), keeping
// the background/hair block largest like the reference ratios.
struct SubspaceLayout {
  std::vector<int> dims;
  std::vector<int> offsets;  // prefix sums; offsets[i] locates subspace i
  int d = 0;
  int d_max = 0;

  explicit SubspaceLayout(std::vector<int> part_dims = {12, 8, 4, 4, 4}) : dims(std::move(part_dims)) {
    if (dims.empty()) throw ConfigError("SubspaceLayout: no subspaces");
    offsets.resize(dims.size());
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (dims[i] <= 0) throw ConfigError("SubspaceLayout: non-positive subspace dim");
      offsets[i] = d;
      d += dims[i];
      d_max = std::max(d_max, dims[i]);
    }
  }

  int count() const { return static_cast<int>(dims.size()); }

  void check_index(int m) const {
    if (m < 0 || m >= count())
      throw ConfigError("subspace index " + std::to_string(m) + " out of range [0," +
                        std::to_string(count()) + ")");
  }

  // Diagonal of the selector D_m: 1 on subspace m's coordinates, else 0.
  Tensor<real> selector(int m) const {
    check_index(m);
    Tensor<real> v({d});
    for (int i = 0; i < dims[static_cast<std::size_t>(m)]; ++i)
      v.data[static_cast<std::size_t>(offsets[static_cast<std::size_t>(m)] + i)] = real(1);
    return v;
  }

  // Diagonal of D_{-m} = I - D_m.
  Tensor<real> selector_complement(int m) const {
    Tensor<real> v = selector(m);
    for (auto& x : v.data) x = real(1) - x;
    return v;
  }
};

}  // namespace isae
