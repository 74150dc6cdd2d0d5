#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/interp.hpp"
#include "sugar/mesh.hpp"
#include "sugar/metrics.hpp"
#include "sugar/rng.hpp"

namespace sugar {

/// Real spherical harmonic Y_l^m at a unit vector, via the associated
/// Legendre recurrences.
inline double real_sh(int l, int m, const Vec3& v) {
    const int am = std::abs(m);
    const double x = std::clamp(v.z, -1.0, 1.0);
    // P_am^am up the diagonal, then raise l.
    double pmm = 1.0;
    if (am > 0) {
        const double somx2 = std::sqrt(std::max(0.0, 1.0 - x * x));
        double fact = 1.0;
        for (int i = 1; i <= am; ++i) {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
    }
    double p = pmm;
    if (l > am) {
        double pmmp1 = x * (2.0 * am + 1.0) * pmm;
        p = pmmp1;
        for (int ll = am + 2; ll <= l; ++ll) {
            const double pll = (x * (2.0 * ll - 1.0) * pmmp1 - (ll + am - 1.0) * pmm) / (ll - am);
            pmm = pmmp1;
            pmmp1 = pll;
            p = pll;
        }
    }
    double k = (2.0 * l + 1.0) / (4.0 * kPi);
    for (int i = l - am + 1; i <= l + am; ++i) k /= static_cast<double>(i);
    k = std::sqrt(k);
    if (m == 0) return k * p;
    const double phi = std::atan2(v.y, v.x);
    const double sq2 = std::sqrt(2.0);
    return m > 0 ? sq2 * k * p * std::cos(m * phi) : sq2 * k * p * std::sin(am * phi);
}

/// Band-limited random field: sum of real harmonics up to degree lmax.
struct HarmonicSeries {
    int lmax = 0;
    std::vector<double> coeffs;  // (l,m) packed as l*l + (m + l)

    double eval(const Vec3& v) const {
        double s = 0.0;
        int idx = 0;
        for (int l = 0; l <= lmax; ++l)
            for (int m = -l; m <= l; ++m) s += coeffs[idx++] * real_sh(l, m, v);
        return s;
    }

    static HarmonicSeries random(Rng& rng, int lmax, double amplitude, double decay = 1.0) {
        HarmonicSeries h;
        h.lmax = lmax;
        h.coeffs.resize(static_cast<std::size_t>(lmax + 1) * (lmax + 1));
        int idx = 0;
        for (int l = 0; l <= lmax; ++l) {
            const double scale = amplitude / std::pow(1.0 + l, decay);
            for (int m = -l; m <= l; ++m) h.coeffs[idx++] = scale * rng.normal();
        }
        return h;
    }
};

/// One synthetic hemisphere: a geometric feature channel plus a parcellation.
struct Subject {
    std::string name;
    int level = 4;
    FeatureMap features;
    bool has_parcellation = false;
    ParcellationMap parcellation;
};

struct Corpus {
    int level = 4;
    std::vector<Subject> subjects;
};

/// Deterministic synthetic corpus: every subject shares a population
/// template field plus an individual harmonic perturbation and pointwise
/// noise; parcellations are nearest-seed regions with per-subject jitter.
inline Corpus synth_corpus(std::uint64_t seed, int n_subjects, int level,
                           const SurfaceMesh& grid, int parcel_count = 34) {
    if (n_subjects < 1) throw InvalidInput("synth_corpus: need at least one subject");
    if (parcel_count < 2) throw InvalidInput("synth_corpus: need at least two parcels");
    Rng rng(seed);
    const HarmonicSeries population = HarmonicSeries::random(rng, 6, 1.0);
    std::vector<Vec3> seeds(parcel_count);
    for (Vec3& s : seeds) s = rng.unit_vector();

    Corpus corpus;
    corpus.level = level;
    const int n = grid.vertex_count();
    for (int s = 0; s < n_subjects; ++s) {
        Subject subj;
        subj.name = "subject_" + std::to_string(s);
        subj.level = level;
        const HarmonicSeries individual = HarmonicSeries::random(rng, 6, 0.55);
        subj.features = FeatureMap::zeros(grid, {"depth"});
        for (int i = 0; i < n; ++i)
            subj.features.at(i, 0) =
                population.eval(grid.vertices[i]) + individual.eval(grid.vertices[i]) +
                0.02 * rng.normal();
        subj.features.zscore();

        const Mat3 jitter = rotation_from_euler(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                                rng.uniform(-0.05, 0.05));
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_dot = -2.0;
            for (int p = 0; p < parcel_count; ++p) {
                const double d = dot(grid.vertices[i], jitter * seeds[p]);
                if (d > best_dot) {
                    best_dot = d;
                    best = p;
                }
            }
            labels[i] = best;
        }
        subj.parcellation = ParcellationMap::hard(std::move(labels), parcel_count);
        subj.has_parcellation = true;
        corpus.subjects.push_back(std::move(subj));
    }
    return corpus;
}

/// Registration fixture: the fixed sphere carries an analytic field f; the
/// moving sphere carries f sampled through a known smooth warp (global
/// rotation then a per-vertex harmonic angle field), so a ground-truth
/// fold-free alignment exists.
struct BenchmarkPair {
    Subject moving;
    Subject fixed;
    EulerTriple gt_rigid{};
    EulerField gt_field;  // per-vertex increment after the rigid part
};

inline std::vector<BenchmarkPair> benchmark_pairs(std::uint64_t seed, int n_pairs, int level,
                                                  const SurfaceMesh& grid,
                                                  double warp_amplitude = 0.2) {
    Rng rng(seed);
    std::vector<BenchmarkPair> out;
    const int n = grid.vertex_count();
    for (int pi = 0; pi < n_pairs; ++pi) {
        // Slow spectral decay keeps the field sharp enough that alignment
        // gains outweigh the distortion penalties, as with real sulcal maps.
        const HarmonicSeries field = HarmonicSeries::random(rng, 12, 1.0, 0.4);
        const EulerTriple rigid{rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                                rng.uniform(-0.08, 0.08)};
        HarmonicSeries warp_sh[3];
        for (auto& h : warp_sh) h = HarmonicSeries::random(rng, 3, 1.0);
        // Normalize each angle channel to the requested amplitude, then back
        // off until the ground-truth warp is fold-free.
        double peak = 0.0;
        for (int i = 0; i < n; ++i)
            for (const auto& h : warp_sh) peak = std::max(peak, std::abs(h.eval(grid.vertices[i])));
        double scale = warp_amplitude / peak;
        const Mat3 r_g = rotation_from_euler(rigid[0], rigid[1], rigid[2]);
        EulerField gt;
        for (int attempt = 0; attempt < 12; ++attempt) {
            gt = EulerField::zeros(n);
            std::vector<Vec3> moved(n);
            for (int i = 0; i < n; ++i) {
                const Vec3 x = r_g * grid.vertices[i];
                gt.angles[i] = {scale * warp_sh[0].eval(x), scale * warp_sh[1].eval(x),
                                scale * warp_sh[2].eval(x)};
                moved[i] = rotation_from_euler(gt.angles[i][0], gt.angles[i][1],
                                               gt.angles[i][2]) * x;
            }
            bool folded = false;
            for (const FaceTri& f : grid.faces)
                if (oriented_area(moved[f[0]], moved[f[1]], moved[f[2]]) <= 0.0) {
                    folded = true;
                    break;
                }
            if (!folded) break;
            scale *= 0.75;
        }

        BenchmarkPair pair;
        pair.gt_rigid = rigid;
        pair.gt_field = gt;
        pair.fixed.name = "fixed_" + std::to_string(pi);
        pair.fixed.level = level;
        pair.fixed.features = FeatureMap::zeros(grid, {"depth"});
        pair.moving.name = "moving_" + std::to_string(pi);
        pair.moving.level = level;
        pair.moving.features = FeatureMap::zeros(grid, {"depth"});
        for (int i = 0; i < n; ++i) {
            pair.fixed.features.at(i, 0) = field.eval(grid.vertices[i]);
            const Vec3 x = r_g * grid.vertices[i];
            const Vec3 w = rotation_from_euler(gt.angles[i][0], gt.angles[i][1],
                                               gt.angles[i][2]) * x;
            pair.moving.features.at(i, 0) = field.eval(w);
        }
        pair.fixed.features.zscore();
        pair.moving.features.zscore();
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace sugar
