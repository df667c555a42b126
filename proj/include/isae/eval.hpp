#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "isae/layout.hpp"
#include "isae/linalg.hpp"
#include "isae/losses.hpp"
#include "isae/model.hpp"
#include "isae/rng.hpp"
#include "isae/sprites.hpp"

namespace isae {

namespace eval_detail {

template <typename T>
Tensor<T> image_batch(const std::vector<Sprite>& data, const std::vector<int>& idx) {
  Tensor<T> out({static_cast<int>(idx.size()), kImageC, kImageH, kImageW});
  const std::size_t n = static_cast<std::size_t>(kImageC) * kImageH * kImageW;
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t i = 0; i < n; ++i)
      out.data[b * n + i] = static_cast<T>(data[static_cast<std::size_t>(idx[b])].image.data[i]);
  return out;
}

// s_mix[k] takes subspace i's coordinates from s_rows[assign[i]].
template <typename T>
std::vector<T> assemble_mix(const SubspaceLayout& layout, const Tensor<T>& s_rows,
                            const std::vector<int>& assign) {
  if (static_cast<int>(assign.size()) != layout.count())
    throw ConfigError("assemble_mix: assignment covers " + std::to_string(assign.size()) +
                      " subspaces, layout has " + std::to_string(layout.count()));
  std::vector<T> s_mix(static_cast<std::size_t>(layout.d));
  for (int i = 0; i < layout.count(); ++i) {
    const int src = assign[static_cast<std::size_t>(i)];
    if (src < 0 || src >= s_rows.dim(0))
      throw ConfigError("assemble_mix: source index " + std::to_string(src) + " out of range");
    for (int k = 0; k < layout.dims[static_cast<std::size_t>(i)]; ++k) {
      const int col = layout.offsets[static_cast<std::size_t>(i)] + k;
      s_mix[static_cast<std::size_t>(col)] = s_rows.at(src, col);
    }
  }
  return s_mix;
}

}  // namespace eval_detail

// Latent codes for the whole dataset, encoded in fixed-size chunks. [N,d]
template <typename T>
Tensor<T> encode_all(Model<T>& model, const std::vector<Sprite>& data, int chunk = 64) {
  const int n = static_cast<int>(data.size());
  if (n == 0) throw ConfigError("encode_all: empty dataset");
  Tensor<T> out({n, model.layout.d});
  for (int start = 0; start < n; start += chunk) {
    const int count = std::min(chunk, n - start);
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const Tensor<T> z = model.encode_values(eval_detail::image_batch<T>(data, idx));
    std::copy(z.data.begin(), z.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start) * model.layout.d);
  }
  return out;
}

// Rows s = A^-1 z for a matrix of latent rows. [N,d]
template <typename T>
Tensor<T> sources_all(Model<T>& model, const Tensor<T>& z_all) {
  Tensor<T> out(z_all.shape);
  const auto& inv = model.mixing.inverse();
  gemm_nt_acc(z_all.data.data(), inv.data.data(), out.data.data(), z_all.dim(0), z_all.dim(1),
              z_all.dim(1));
  return out;
}

struct MixingErrorReport {
  std::vector<double> per_subspace;  // mean normalized error per subspace
  std::vector<int> counted;          // groups that contributed to each mean
  int groups = 0;
};

// Per group of C sprites, compose a latent taking subspace j from sprite j,
// decode it, and measure the mean absolute RGB difference against each donor
// inside that donor's ground-truth part mask, normalized by the mask's soft
// area. Zero-area masks are skipped with a warning instead of dividing.
template <typename T>
MixingErrorReport mixing_error(Model<T>& model, const std::vector<Sprite>& data, int groups,
                               std::uint64_t seed) {
  const int c = model.layout.count();
  if (groups < 1) throw ConfigError("mixing_error: need at least one group");

  if (static_cast<long long>(data.size()) < static_cast<long long>(c) * groups)
    throw ConfigError("mixing_error: " + std::to_string(groups) + " groups of " +
                      std::to_string(c) + " need at least " + std::to_string(c * groups) +
                      " sprites, dataset has " + std::to_string(data.size()));

  MixingErrorReport report;
  report.groups = groups;
  report.per_subspace.assign(static_cast<std::size_t>(c), 0.0);
  report.counted.assign(static_cast<std::size_t>(c), 0);
  bool warned = false;
  constexpr std::size_t kPlane = static_cast<std::size_t>(kImageH) * kImageW;

  Rng rng(seed);
  std::vector<int> assign(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) assign[static_cast<std::size_t>(j)] = j;

  for (int gi = 0; gi < groups; ++gi) {
    const auto pick = rng.sample_without_replacement(data.size(), static_cast<std::size_t>(c));
    const std::vector<int> idx(pick.begin(), pick.end());

    const Tensor<T> z = model.encode_values(eval_detail::image_batch<T>(data, idx));
    const Tensor<T> s = sources_all(model, z);
    const auto s_mix = eval_detail::assemble_mix(model.layout, s, assign);
    const auto z_mix = model.to_latent_values(s_mix);
    Tensor<T> z_row({1, model.layout.d});
    z_row.data.assign(z_mix.begin(), z_mix.end());
    const Tensor<T> i_mix = model.decode_values(z_row);

    for (int j = 0; j < c; ++j) {
      const Sprite& donor = data[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];
      double num = 0.0, den = 0.0;
      for (std::size_t px = 0; px < kPlane; ++px) {
        const double mv = donor.masks.data[static_cast<std::size_t>(j) * kPlane + px];
        if (mv == 0.0) continue;
        double diff = 0.0;
        for (int ch = 0; ch < kImageC; ++ch)
          diff += std::abs(static_cast<double>(i_mix.data[static_cast<std::size_t>(ch) * kPlane + px]) -
                           donor.image.data[static_cast<std::size_t>(ch) * kPlane + px]);
        num += mv * diff / kImageC;
        den += mv;
      }
      if (den <= 0.0) {
        if (!warned) {
          std::cerr << "warning: zero-area mask for part '"
                    << kPartNames[static_cast<std::size_t>(j)] << "', skipping its term\n";
          warned = true;
        }
        continue;
      }
      report.per_subspace[static_cast<std::size_t>(j)] += num / den;
      report.counted[static_cast<std::size_t>(j)] += 1;
    }
  }

  for (int j = 0; j < c; ++j)
    if (report.counted[static_cast<std::size_t>(j)] > 0)
      report.per_subspace[static_cast<std::size_t>(j)] /= report.counted[static_cast<std::size_t>(j)];
  return report;
}

struct Pca3 {
  Tensor<double> axes;       // [3, d_i], rows orthonormal
  Tensor<double> projected;  // [N, 3]
  std::array<double, 3> eigenvalues{};
  bool rank_deficient = false;
};

// Top-3 principal axes of mean-centered samples. Rank-deficient inputs are
// padded with an arbitrary orthonormal completion and flagged. Axis signs are
// fixed so each axis's largest-magnitude entry is positive.
inline Pca3 pca3(const Tensor<double>& samples) {
  if (samples.rank() != 2)
    throw ShapeError("pca3: expected [N,d] samples, got " + shape_str(samples.shape));
  const int n = samples.dim(0), d = samples.dim(1);
  if (n <= 3) throw ConfigError("pca3: need more than 3 samples, got " + std::to_string(n));
  if (d < 3) throw ConfigError("pca3: need dimension >= 3, got " + std::to_string(d));

  Tensor<double> centered(samples.shape);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += samples.at(i, j);
    mean /= n;
    for (int i = 0; i < n; ++i) centered.at(i, j) = samples.at(i, j) - mean;
  }

  std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a)
      for (int b = a; b < d; ++b)
        cov[static_cast<std::size_t>(a) * d + b] += centered.at(i, a) * centered.at(i, b);
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      cov[static_cast<std::size_t>(a) * d + b] /= n - 1;
      cov[static_cast<std::size_t>(b) * d + a] = cov[static_cast<std::size_t>(a) * d + b];
    }

  const EigenDecomposition eig = sym_eig_jacobi(cov, d);
  double scale = std::max(std::abs(eig.values.front()), 1.0);

  Pca3 out;
  out.axes = Tensor<double>({3, d});
  std::vector<std::vector<double>> chosen;
  for (int r = 0; r < 3; ++r) {
    out.eigenvalues[static_cast<std::size_t>(r)] = eig.values[static_cast<std::size_t>(r)];
    std::vector<double> axis = eig.vectors[static_cast<std::size_t>(r)];
    if (eig.values[static_cast<std::size_t>(r)] < 1e-12 * scale) {
      // degenerate direction: replace with any unit vector orthogonal to the
      // axes already chosen (Gram-Schmidt over the coordinate basis)
      out.rank_deficient = true;
      axis.assign(static_cast<std::size_t>(d), 0.0);
      for (int seed_axis = 0; seed_axis < d; ++seed_axis) {
        std::vector<double> cand(static_cast<std::size_t>(d), 0.0);
        cand[static_cast<std::size_t>(seed_axis)] = 1.0;
        for (const auto& prev : chosen) {
          double dot = 0.0;
          for (int k = 0; k < d; ++k) dot += cand[static_cast<std::size_t>(k)] * prev[static_cast<std::size_t>(k)];
          for (int k = 0; k < d; ++k) cand[static_cast<std::size_t>(k)] -= dot * prev[static_cast<std::size_t>(k)];
        }
        double norm = 0.0;
        for (double x : cand) norm += x * x;
        if (norm > 1e-8) {
          norm = std::sqrt(norm);
          for (int k = 0; k < d; ++k) axis[static_cast<std::size_t>(k)] = cand[static_cast<std::size_t>(k)] / norm;
          break;
        }
      }
    }
    int arg = 0;
    for (int k = 1; k < d; ++k)
      if (std::abs(axis[static_cast<std::size_t>(k)]) > std::abs(axis[static_cast<std::size_t>(arg)])) arg = k;
    if (axis[static_cast<std::size_t>(arg)] < 0.0)
      for (auto& x : axis) x = -x;
    for (int k = 0; k < d; ++k) out.axes.at(r, k) = axis[static_cast<std::size_t>(k)];
    chosen.push_back(std::move(axis));
  }

  out.projected = Tensor<double>({n, 3});
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += centered.at(i, k) * out.axes.at(r, k);
      out.projected.at(i, r) = acc;
    }
  return out;
}

struct SubspaceAnalysis {
  std::vector<std::string> subspaces;                    // part names, layout order
  std::vector<Tensor<double>> axes;                      // per subspace, [3, d_i]
  std::vector<std::map<std::string, double>> distances;  // attr -> class-mean L2 distance
  std::vector<bool> rank_deficient;
};

// Per subspace: project its source coordinates to 3 principal dimensions and
// measure, per attribute, the distance between the class means. Attributes
// with fewer than 10 samples on either side are excluded with a warning.
template <typename T>
SubspaceAnalysis attribute_separation(Model<T>& model, const std::vector<Sprite>& data) {
  const int c = model.layout.count();
  const Tensor<T> s_all = sources_all(model, encode_all(model, data));
  const int n = s_all.dim(0);

  SubspaceAnalysis out;
  for (int i = 0; i < c; ++i) {
    const int off = model.layout.offsets[static_cast<std::size_t>(i)];
    const int di = model.layout.dims[static_cast<std::size_t>(i)];
    Tensor<double> samples({n, di});
    for (int r = 0; r < n; ++r)
      for (int k = 0; k < di; ++k) samples.at(r, k) = static_cast<double>(s_all.at(r, off + k));
    const Pca3 p = pca3(samples);

    std::map<std::string, double> dist;
    for (int bit = 0; bit < kNumAttrs; ++bit) {
      std::array<double, 3> mean_true{}, mean_false{};
      int n_true = 0, n_false = 0;
      for (int r = 0; r < n; ++r) {
        const bool on = data[static_cast<std::size_t>(r)].attr(bit);
        auto& mean = on ? mean_true : mean_false;
        (on ? n_true : n_false) += 1;
        for (int k = 0; k < 3; ++k) mean[static_cast<std::size_t>(k)] += p.projected.at(r, k);
      }
      if (n_true < 10 || n_false < 10) {
        if (i == 0)
          std::cerr << "warning: attribute '" << kAttrNames[static_cast<std::size_t>(bit)]
                    << "' has too few samples on one side (" << n_true << "/" << n_false
                    << "); excluded\n";
        continue;
      }
      double d2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double diff = mean_true[static_cast<std::size_t>(k)] / n_true -
                            mean_false[static_cast<std::size_t>(k)] / n_false;
        d2 += diff * diff;
      }
      dist[kAttrNames[static_cast<std::size_t>(bit)]] = std::sqrt(d2);
    }

    out.subspaces.push_back(kPartNames[static_cast<std::size_t>(i)]);
    out.axes.push_back(p.axes);
    out.distances.push_back(std::move(dist));
    out.rank_deficient.push_back(p.rank_deficient);
  }
  return out;
}

// Direction of an attribute in source space: mean of s over positive samples
// minus the mean over all samples.
template <typename T>
std::vector<T> attribute_direction(Model<T>& model, const std::vector<Sprite>& data,
                                   const std::string& attr) {
  const int bit = attr_index(attr);
  const Tensor<T> s_all = sources_all(model, encode_all(model, data));
  const int n = s_all.dim(0), d = s_all.dim(1);
  std::vector<double> mean_pos(static_cast<std::size_t>(d), 0.0);
  std::vector<double> mean_all(static_cast<std::size_t>(d), 0.0);
  int n_pos = 0;
  for (int r = 0; r < n; ++r) {
    const bool on = data[static_cast<std::size_t>(r)].attr(bit);
    n_pos += on;
    for (int k = 0; k < d; ++k) {
      const double v = static_cast<double>(s_all.at(r, k));
      mean_all[static_cast<std::size_t>(k)] += v;
      if (on) mean_pos[static_cast<std::size_t>(k)] += v;
    }
  }
  if (n_pos == 0)
    throw ConfigError("attribute_direction: no sprite has attribute '" + attr + "'");
  std::vector<T> v(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k)
    v[static_cast<std::size_t>(k)] = static_cast<T>(mean_pos[static_cast<std::size_t>(k)] / n_pos -
                                                    mean_all[static_cast<std::size_t>(k)] / n);
  return v;
}

// Edit in latent space: z' = z + strength * (A v), which equals mapping
// s + strength*v back through A but reconstructs bit-identically at
// strength 0 because z is never routed through the inverse.
template <typename T>
Tensor<T> attribute_edit(Model<T>& model, const std::vector<Sprite>& data,
                         const std::string& attr, const Tensor<T>& image, double strength) {
  if (image.shape != std::vector<int>{kImageC, kImageH, kImageW})
    throw ShapeError("attribute_edit: expected a [3,32,32] image, got " + shape_str(image.shape));
  const auto v = attribute_direction(model, data, attr);
  const auto av = model.to_latent_values(v);

  Tensor<T> batch({1, kImageC, kImageH, kImageW});
  batch.data = image.data;
  Tensor<T> z = model.encode_values(batch);
  for (int k = 0; k < model.layout.d; ++k)
    z.data[static_cast<std::size_t>(k)] += static_cast<T>(strength) * av[static_cast<std::size_t>(k)];
  Tensor<T> out_img = model.decode_values(z);
  Tensor<T> out({kImageC, kImageH, kImageW});
  out.data = std::move(out_img.data);
  return out;
}

// Fraction of (sample, subspace) instances whose head embedding the shared
// classifier assigns to the right subspace. Chance is 1/C.
template <typename T>
double classifier_accuracy(Model<T>& model, const std::vector<Sprite>& data) {
  const int c = model.layout.count();
  const Tensor<T> s_all = sources_all(model, encode_all(model, data));
  const int n = s_all.dim(0);
  long long hits = 0;
  const auto& cls_w = model.find("cls.w")->value;
  const auto& cls_b = model.find("cls.b")->value;
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < c; ++i) {
      const auto& w = model.find("head." + std::to_string(i) + ".w")->value;
      const auto& b = model.find("head." + std::to_string(i) + ".b")->value;
      const int off = model.layout.offsets[static_cast<std::size_t>(i)];
      const int di = model.layout.dims[static_cast<std::size_t>(i)];
      std::vector<double> h(static_cast<std::size_t>(model.layout.d_max));
      for (int j = 0; j < model.layout.d_max; ++j) {
        double acc = static_cast<double>(b.data[static_cast<std::size_t>(j)]);
        for (int k = 0; k < di; ++k)
          acc += static_cast<double>(s_all.at(r, off + k)) * w.at(k, j);
        h[static_cast<std::size_t>(j)] = std::max(acc, 0.0);
      }
      int best = 0;
      double best_logit = 0.0;
      for (int cc = 0; cc < c; ++cc) {
        double logit = static_cast<double>(cls_b.data[static_cast<std::size_t>(cc)]);
        for (int j = 0; j < model.layout.d_max; ++j)
          logit += h[static_cast<std::size_t>(j)] * cls_w.at(j, cc);
        if (cc == 0 || logit > best_logit) {
          best_logit = logit;
          best = cc;
        }
      }
      hits += best == i;
    }
  }
  return static_cast<double>(hits) / (static_cast<double>(n) * c);
}

// Row-major grid of decoded mixes with the raw source images in the first and
// last cells. Unused cells are mid-gray; cells are separated by 1px black
// rules. Returns a [3,H,W] image for export_ppm.
template <typename T>
Tensor<T> mix_grid(Model<T>& model, const std::vector<Tensor<T>>& images,
                   const std::vector<MixSpec>& assignments, int rows, int cols) {
  if (images.empty() || images.size() > 3)
    throw ConfigError("mix_grid: need 1 to 3 source images, got " + std::to_string(images.size()));
  for (const auto& img : images)
    if (img.shape != std::vector<int>{kImageC, kImageH, kImageW})
      throw ShapeError("mix_grid: expected [3,32,32] images, got " + shape_str(img.shape));

  const int c = model.layout.count();
  Tensor<T> batch({static_cast<int>(images.size()), kImageC, kImageH, kImageW});
  const std::size_t n = static_cast<std::size_t>(kImageC) * kImageH * kImageW;
  for (std::size_t b = 0; b < images.size(); ++b)
    std::copy(images[b].data.begin(), images[b].data.end(),
              batch.data.begin() + static_cast<std::ptrdiff_t>(b * n));
  const Tensor<T> s = sources_all(model, model.encode_values(batch));

  std::vector<Tensor<T>> mixes;
  for (const auto& spec : assignments) {
    std::vector<int> assign = spec.assign;
    if (assign.empty()) {
      if (images.size() < 2)
        throw ConfigError("mix_grid: single-subspace swap needs two source images");
      model.layout.check_index(spec.m);
      assign.assign(static_cast<std::size_t>(c), 0);
      assign[static_cast<std::size_t>(spec.m)] = 1;
    }
    const auto s_mix = eval_detail::assemble_mix(model.layout, s, assign);
    const auto z_mix = model.to_latent_values(s_mix);
    Tensor<T> z_row({1, model.layout.d});
    z_row.data.assign(z_mix.begin(), z_mix.end());
    Tensor<T> decoded = model.decode_values(z_row);
    Tensor<T> cell({kImageC, kImageH, kImageW});
    cell.data = std::move(decoded.data);
    mixes.push_back(std::move(cell));
  }

  // First source sits top-left, the remaining sources fill the trailing cells
  // so the last one lands bottom-right; mixes run row-major in between.
  const std::size_t total = static_cast<std::size_t>(rows) * cols;
  const std::size_t trailing = images.size() - 1;
  if (rows < 1 || cols < 1 || total < 1 + mixes.size() + trailing)
    throw ConfigError("mix_grid: grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " cannot hold " + std::to_string(1 + mixes.size() + trailing) + " cells");
  std::vector<const Tensor<T>*> cells(total, nullptr);
  cells[0] = &images[0];
  for (std::size_t i = 0; i < mixes.size(); ++i) cells[1 + i] = &mixes[i];
  for (std::size_t i = 0; i < trailing; ++i) cells[total - trailing + i] = &images[1 + i];

  const int out_h = rows * kImageH + (rows - 1);
  const int out_w = cols * kImageW + (cols - 1);
  Tensor<T> grid = Tensor<T>::full({kImageC, out_h, out_w}, T(0.5));
  for (int ch = 0; ch < kImageC; ++ch) {
    for (int r = 1; r < rows; ++r)
      for (int x = 0; x < out_w; ++x)
        grid.data[(static_cast<std::size_t>(ch) * out_h + static_cast<std::size_t>(r) * (kImageH + 1) - 1) * out_w + static_cast<std::size_t>(x)] = T(0);
    for (int cidx = 1; cidx < cols; ++cidx)
      for (int y = 0; y < out_h; ++y)
        grid.data[(static_cast<std::size_t>(ch) * out_h + static_cast<std::size_t>(y)) * out_w + static_cast<std::size_t>(cidx) * (kImageW + 1) - 1] = T(0);
  }
  for (std::size_t cell = 0; cell < total; ++cell) {
    if (cells[cell] == nullptr) continue;
    const int r = static_cast<int>(cell) / cols;
    const int cx = static_cast<int>(cell) % cols;
    const int y0 = r * (kImageH + 1);
    const int x0 = cx * (kImageW + 1);
    for (int ch = 0; ch < kImageC; ++ch)
      for (int y = 0; y < kImageH; ++y)
        for (int x = 0; x < kImageW; ++x)
          grid.data[(static_cast<std::size_t>(ch) * out_h + y0 + y) * out_w + x0 + x] =
              cells[cell]->data[(static_cast<std::size_t>(ch) * kImageH + y) * kImageW + x];
  }
  return grid;
}

inline void write_mixing_report(const MixingErrorReport& report, const std::string& path) {
  nlohmann::json j;
  j["per_subspace"] = report.per_subspace;
  j["counted"] = report.counted;
  j["groups"] = report.groups;
  j["subspaces"] = kPartNames;
  std::ofstream os(path);
  if (!os) throw IoError("write_mixing_report: cannot open '" + path + "'");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write_mixing_report: write failed for '" + path + "'");
}

inline void write_analysis_report(const SubspaceAnalysis& analysis, const std::string& path) {
  nlohmann::json j;
  for (std::size_t i = 0; i < analysis.subspaces.size(); ++i) {
    nlohmann::json entry;
    entry["attributes"] = analysis.distances[i];
    entry["rank_deficient"] = static_cast<bool>(analysis.rank_deficient[i]);
    j[analysis.subspaces[i]] = std::move(entry);
  }
  std::ofstream os(path);
  if (!os) throw IoError("write_analysis_report: cannot open '" + path + "'");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write_analysis_report: write failed for '" + path + "'");
}

}  // namespace isae
