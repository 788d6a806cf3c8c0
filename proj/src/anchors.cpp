#include "fedmema/anchors.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>

#include "fedmema/errors.hpp"
#include "fedmema/rng.hpp"
#include "fedmema/wire.hpp"

namespace fedmema {

std::vector<ClassFeature> masked_class_pool(const FeaturePyramid& fused, const LabelMap& mask,
                                            std::size_t num_classes, std::size_t sample_offset) {
  std::vector<ClassFeature> out;
  for (auto v : mask.labels) {
    if (v >= num_classes) {
      throw DataError("masked_class_pool: label " + std::to_string(v) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
  const std::size_t classes = num_classes;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const Tensor& f = fused.level(l);
    const bool batched = f.rank() == 4;
    if (!batched && f.rank() != 3) throw DimensionError("masked_class_pool: bad feature rank " + shape_str(f.shape()));
    const std::size_t batch = batched ? f.dim(0) : 1;
    const std::size_t ch = f.dim(f.rank() - 3), h = f.dim(f.rank() - 2), w = f.dim(f.rank() - 1);
    if (batch != mask.batch || mask.height % h != 0 || mask.width % w != 0 ||
        mask.height / h != mask.width / w) {
      throw DimensionError("masked_class_pool: level " + std::to_string(l) + " features " + shape_str(f.shape()) +
                           " do not tile a " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                           " mask of batch " + std::to_string(mask.batch));
    }
    const std::size_t factor = mask.height / h;
    const auto data = f.data();
    std::vector<double> counts(classes * h * w);
    for (std::size_t n = 0; n < batch; ++n) {
      std::fill(counts.begin(), counts.end(), 0.0);
      for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x)
          counts[(mask.at(n, y, x) * h + y / factor) * w + x / factor] += 1.0;
      const double* feat = data.data() + n * ch * h * w;
      for (std::size_t c = 0; c < classes; ++c) {
        const double* cc = counts.data() + c * h * w;
        const double total = std::accumulate(cc, cc + h * w, 0.0);
        if (total == 0.0) continue;
        ClassFeature cf;
        cf.sample = sample_offset + n;
        cf.class_id = static_cast<std::uint16_t>(c);
        cf.level = l;
        cf.values.assign(ch, 0.0);
        for (std::size_t k = 0; k < ch; ++k) {
          double acc = 0.0;
          for (std::size_t p = 0; p < h * w; ++p) acc += cc[p] * feat[k * h * w + p];
          cf.values[k] = acc / total;
        }
        out.push_back(std::move(cf));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// K-means

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

std::size_t nearest(std::span<const double> p, const std::vector<std::vector<double>>& centroids, double* dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < centroids.size(); ++j) {
    const double d = sq_dist(p, centroids[j]);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

std::vector<std::vector<double>> plus_plus_init(const std::vector<std::vector<double>>& pts, std::size_t k,
                                                Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> centroids;
  centroids.push_back(pts[std::uniform_int_distribution<std::size_t>(0, pts.size() - 1)(rng)]);
  std::vector<double> d2(pts.size());
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      nearest(pts[i], centroids, &d2[i]);
      total += d2[i];
    }
    std::size_t pick = pts.size() - 1;
    if (total <= 0.0) {
      pick = std::uniform_int_distribution<std::size_t>(0, pts.size() - 1)(rng);
    } else {
      const double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        acc += d2[i];
        if (acc > target) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(pts[pick]);
  }
  return centroids;
}

KMeansResult lloyd(const std::vector<std::vector<double>>& pts, std::size_t k, Rng& rng,
                   std::size_t max_iterations) {
  const std::size_t dim = pts.front().size();
  KMeansResult res;
  res.centroids = plus_plus_init(pts, k, rng);
  res.membership.assign(pts.size(), 0);
  std::vector<double> dist(pts.size());

  auto assign = [&] {
    double sse = 0.0;
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t j = nearest(pts[i], res.centroids, &dist[i]);
      changed |= j != res.membership[i];
      res.membership[i] = j;
      sse += dist[i];
    }
    res.sse_history.push_back(sse);
    res.sse = sse;
    return changed;
  };
  assign();
  for (std::size_t it = 0; it < max_iterations; ++it) {
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto& s = sums[res.membership[i]];
      for (std::size_t d = 0; d < dim; ++d) s[d] += pts[i][d];
      ++counts[res.membership[i]];
    }
    std::vector<bool> taken(pts.size(), false);
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) {
        for (std::size_t d = 0; d < dim; ++d) res.centroids[j][d] = sums[j][d] / static_cast<double>(counts[j]);
        continue;
      }
      // Empty cluster: move it onto the worst-served point.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      res.centroids[j] = pts[far];
    }
    res.iterations = it + 1;
    const double before = res.sse;
    const bool changed = assign();
    assert(res.sse <= before * (1.0 + 1e-12) + 1e-300);
    (void)before;
    if (!changed) break;
  }
  return res;
}

}  // namespace

double kmeans_sse(const std::vector<std::vector<double>>& points,
                  const std::vector<std::vector<double>>& centroids) {
  double sse = 0.0;
  for (const auto& p : points) {
    double d = 0.0;
    nearest(p, centroids, &d);
    sse += d;
  }
  return sse;
}

KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& options) {
  if (points.empty()) throw ContractError("kmeans: empty point list");
  if (k == 0) throw ContractError("kmeans: k must be positive");
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw DimensionError("kmeans: points have differing dimensions");
  }
  std::vector<std::vector<double>> pts = points;
  for (std::size_t i = 0; pts.size() < k; ++i) pts.push_back(points[i % points.size()]);

  KMeansResult best;
  const std::size_t restarts = std::max<std::size_t>(1, options.restarts);
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, "kmeans", r));
    KMeansResult res = lloyd(pts, k, rng, options.max_iterations);
    if (r == 0 || res.sse < best.sse) best = std::move(res);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Anchor sets

AnchorSet::AnchorSet(std::size_t anchors_per_class, std::size_t classes,
                     std::array<std::size_t, kLevels> level_widths)
    : n_k(anchors_per_class), n_c(classes), widths(level_widths) {
  if (n_k == 0 || n_c == 0) throw ConfigError("anchor set needs n_k >= 1 and at least one class");
  for (std::size_t l = 0; l < kLevels; ++l) values[l].assign(rows() * widths[l], 0.0);
  labels.resize(rows());
  for (std::size_t r = 0; r < rows(); ++r) labels[r] = static_cast<std::uint16_t>(r / n_k);
  initialized.assign(rows(), false);
}

std::span<double> AnchorSet::row(std::size_t level, std::size_t r) {
  return std::span<double>(values[level - 1]).subspan(r * widths[level - 1], widths[level - 1]);
}

std::span<const double> AnchorSet::row(std::size_t level, std::size_t r) const {
  return std::span<const double>(values[level - 1]).subspan(r * widths[level - 1], widths[level - 1]);
}

std::size_t AnchorSet::initialized_count() const {
  return static_cast<std::size_t>(std::count(initialized.begin(), initialized.end(), true));
}

namespace {

// Mean over contiguous channel groups, reducing `v` to `target` values.
std::vector<double> group_mean(const std::vector<double>& v, std::size_t target) {
  const std::size_t group = v.size() / target;
  std::vector<double> out(target, 0.0);
  for (std::size_t i = 0; i < target; ++i) {
    for (std::size_t j = 0; j < group; ++j) out[i] += v[i * group + j];
    out[i] /= static_cast<double>(group);
  }
  return out;
}

}  // namespace

AnchorSet extract_anchors(const std::vector<ClassFeature>& features, std::size_t num_classes,
                          const std::array<std::size_t, kLevels>& widths, const AnchorExtractOptions& options) {
  AnchorSet set(options.n_k, num_classes, widths);
  // class -> sample -> per-level vectors; std::map keeps samples in id order so
  // the result does not depend on the order of `features`.
  std::vector<std::map<std::size_t, std::array<const std::vector<double>*, kLevels>>> by_class(num_classes);
  for (const auto& f : features) {
    if (f.class_id >= num_classes) {
      throw DataError("extract_anchors: class " + std::to_string(f.class_id) + " out of range");
    }
    if (f.level < 1 || f.level > kLevels || f.values.size() != widths[f.level - 1]) {
      throw DimensionError("extract_anchors: feature at level " + std::to_string(f.level) + " has " +
                           std::to_string(f.values.size()) + " values");
    }
    auto& slot = by_class[f.class_id][f.sample];
    slot[f.level - 1] = &f.values;
  }

  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& samples = by_class[c];
    if (samples.empty()) {
      std::cerr << "warning: class " << c << " has no features; its anchors stay uninitialized\n";
      continue;
    }
    std::vector<std::array<const std::vector<double>*, kLevels>> members;
    for (const auto& [id, levels] : samples) {
      for (std::size_t l = 0; l < kLevels; ++l) {
        if (levels[l] == nullptr) {
          throw ContractError("extract_anchors: sample " + std::to_string(id) + " lacks class " +
                              std::to_string(c) + " at level " + std::to_string(l + 1));
        }
      }
      members.push_back(levels);
    }
    for (std::size_t i = 0; members.size() < options.n_k; ++i) members.push_back(members[i]);

    std::vector<std::vector<double>> points;
    for (const auto& m : members) {
      if (options.membership == MembershipLevel::Concat) {
        std::vector<double> joined;
        for (std::size_t l = 0; l < kLevels; ++l) {
          auto part = group_mean(*m[l], widths[0]);
          joined.insert(joined.end(), part.begin(), part.end());
        }
        points.push_back(std::move(joined));
      } else {
        points.push_back(*m[static_cast<std::size_t>(options.membership) - 1]);
      }
    }
    const auto km = kmeans(points, options.n_k, derive_seed(options.seed, "anchors", c), options.kmeans);

    std::vector<std::size_t> counts(options.n_k, 0);
    for (auto j : km.membership) ++counts[j];
    // Duplicated points can leave a centroid without members (ties go to the
    // lowest index); it then takes the features of the point it sits on.
    std::vector<std::size_t> stand_in(options.n_k, 0);
    for (std::size_t j = 0; j < options.n_k; ++j) {
      if (counts[j] > 0) continue;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = sq_dist(points[i], km.centroids[j]);
        if (d < best) {
          best = d;
          stand_in[j] = i;
        }
      }
    }
    for (std::size_t l = 1; l <= kLevels; ++l) {
      for (std::size_t i = 0; i < members.size(); ++i) {
        auto dst = set.row(l, c * options.n_k + km.membership[i]);
        const auto& src = *members[i][l - 1];
        for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += src[d];
      }
      for (std::size_t j = 0; j < options.n_k; ++j) {
        auto dst = set.row(l, c * options.n_k + j);
        if (counts[j] == 0) {
          const auto& src = *members[stand_in[j]][l - 1];
          std::copy(src.begin(), src.end(), dst.begin());
          continue;
        }
        for (auto& v : dst) v /= static_cast<double>(counts[j]);
      }
    }
    for (std::size_t j = 0; j < options.n_k; ++j) set.initialized[c * options.n_k + j] = true;
  }
  return set;
}

// ---------------------------------------------------------------------------
// Bank

AnchorBank::AnchorBank(std::size_t n_k, std::size_t n_c, std::array<std::size_t, kLevels> widths)
    : set_(n_k, n_c, widths) {}

AnchorMatrices AnchorBank::matrices() const {
  AnchorMatrices out;
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < set_.rows(); ++r)
    if (set_.initialized[r]) rows.push_back(r);
  if (rows.empty()) throw ProtocolError("anchor bank has no initialized anchors");
  for (auto r : rows) out.labels.push_back(set_.labels[r]);
  for (std::size_t l = 1; l <= kLevels; ++l) {
    std::vector<double> v;
    v.reserve(rows.size() * set_.widths[l - 1]);
    for (auto r : rows) {
      auto src = set_.row(l, r);
      v.insert(v.end(), src.begin(), src.end());
    }
    out.levels[l - 1] = Tensor({rows.size(), set_.widths[l - 1]}, std::move(v));
  }
  return out;
}

double ema_update(AnchorBank& bank, const AnchorSet& fresh, double omega) {
  AnchorSet& cur = bank.set_;
  if (!(omega >= 0.0 && omega < 1.0)) throw ConfigError("EMA weight must lie in [0, 1)");
  if (cur.n_k != fresh.n_k || cur.n_c != fresh.n_c || cur.widths != fresh.widths) {
    throw ProtocolError("ema_update: fresh anchors (n_k=" + std::to_string(fresh.n_k) + ", n_c=" +
                        std::to_string(fresh.n_c) + ") do not match the bank (n_k=" + std::to_string(cur.n_k) +
                        ", n_c=" + std::to_string(cur.n_c) + ")");
  }
  double drift_sq = 0.0;
  auto blend = [&](std::size_t bank_row, std::size_t fresh_row, double w) {
    for (std::size_t l = 1; l <= kLevels; ++l) {
      auto dst = cur.row(l, bank_row);
      auto src = fresh.row(l, fresh_row);
      for (std::size_t d = 0; d < dst.size(); ++d) {
        if (dst[d] == src[d]) continue;
        const double next = w * dst[d] + (1.0 - w) * src[d];
        drift_sq += (next - dst[d]) * (next - dst[d]);
        dst[d] = next;
      }
    }
  };

  const std::size_t n_k = cur.n_k;
  for (std::size_t c = 0; c < cur.n_c; ++c) {
    std::vector<std::size_t> bank_rows, empty_rows, fresh_rows;
    for (std::size_t j = 0; j < n_k; ++j) {
      const std::size_t r = c * n_k + j;
      (cur.initialized[r] ? bank_rows : empty_rows).push_back(r);
      if (fresh.initialized[r]) fresh_rows.push_back(r);
    }
    if (fresh_rows.empty()) continue;

    struct Pair {
      double dist;
      std::size_t bank_row, fresh_row;
    };
    std::vector<Pair> pairs;
    for (auto b : bank_rows)
      for (auto f : fresh_rows) pairs.push_back({sq_dist(cur.row(kLevels, b), fresh.row(kLevels, f)), b, f});
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.dist < b.dist; });
    std::vector<bool> bank_used(cur.rows(), false), fresh_used(cur.rows(), false);
    for (const auto& p : pairs) {
      if (bank_used[p.bank_row] || fresh_used[p.fresh_row]) continue;
      bank_used[p.bank_row] = fresh_used[p.fresh_row] = true;
      blend(p.bank_row, p.fresh_row, omega);
    }
    // First fill: copy the remaining fresh anchors verbatim.
    std::size_t next_fresh = 0;
    for (auto r : empty_rows) {
      while (next_fresh < fresh_rows.size() && fresh_used[fresh_rows[next_fresh]]) ++next_fresh;
      if (next_fresh == fresh_rows.size()) break;
      const std::size_t f = fresh_rows[next_fresh];
      fresh_used[f] = true;
      blend(r, f, 0.0);
      cur.initialized[r] = true;
    }
  }
  return std::sqrt(drift_sq);
}

// ---------------------------------------------------------------------------
// Wire format

std::vector<std::uint8_t> encode_anchor_pack(const AnchorMatrices& anchors) {
  ByteWriter w;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const Tensor& a = anchors.levels[l - 1];
    if (a.dim(0) != anchors.labels.size()) throw ContractError("anchor pack: label count differs from rows");
    w.u8(static_cast<std::uint8_t>(l));
    w.u32(static_cast<std::uint32_t>(a.dim(0)));
    w.u32(static_cast<std::uint32_t>(a.dim(1)));
    for (auto lab : anchors.labels) w.u16(lab);
    w.f64s(a.data());
  }
  return w.take();
}

AnchorMatrices decode_anchor_pack(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "anchor pack");
  AnchorMatrices out;
  for (std::size_t l = 1; l <= kLevels; ++l) {
    const auto id = r.u8();
    if (id != l) throw DataError("anchor pack: expected level " + std::to_string(l) + ", got " + std::to_string(id));
    const std::size_t rows = r.u32(), cols = r.u32();
    if (rows == 0 || cols == 0) throw DataError("anchor pack: empty level " + std::to_string(l));
    std::vector<std::uint16_t> labels(rows);
    for (auto& lab : labels) lab = r.u16();
    if (l == 1) {
      out.labels = labels;
    } else if (labels != out.labels) {
      throw DataError("anchor pack: level " + std::to_string(l) + " labels differ from level 1");
    }
    std::vector<double> values(rows * cols);
    r.f64s(values);
    out.levels[l - 1] = Tensor({rows, cols}, std::move(values));
  }
  if (!r.done()) throw DataError("anchor pack: trailing bytes");
  return out;
}

}  // namespace fedmema
