#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"
#include "sugar/mesh.hpp"

namespace sugar {

/// In-plane linear map from an original triangle to its deformed image,
/// summarized by its singular values (lambda1 >= lambda2 > 0).
struct FaceDeformation {
    std::array<std::array<double, 2>, 2> matrix{};
    double lambda1 = 1.0, lambda2 = 1.0;

    double area_ratio() const { return lambda1 * lambda2; }   // J
    double anisotropy() const { return lambda1 / lambda2; }   // R
};

namespace detail {

/// Edge vectors of face t expressed in an orthonormal basis of the face's
/// own plane; columns are (v2-v1, v3-v1).
inline std::array<std::array<double, 2>, 2> face_frame_coords(const SurfaceMesh& mesh, int t) {
    const FaceTri& f = mesh.faces[t];
    const Vec3 e1 = mesh.vertices[f[1]] - mesh.vertices[f[0]];
    const Vec3 e2 = mesh.vertices[f[2]] - mesh.vertices[f[0]];
    const double n1 = norm(e1);
    if (n1 < 1e-15) throw InvalidInput("face_deformation: degenerate face");
    const Vec3 b1 = e1 / n1;
    const Vec3 e2_perp = e2 - b1 * dot(e2, b1);
    const double n2 = norm(e2_perp);
    if (n2 < 1e-15) throw InvalidInput("face_deformation: degenerate face");
    const Vec3 b2 = e2_perp / n2;
    return {{{dot(e1, b1), dot(e2, b1)}, {0.0, dot(e2, b2)}}};
}

inline std::pair<double, double> singular_values_2x2(const std::array<std::array<double, 2>, 2>& d) {
    const double e = (d[0][0] + d[1][1]) / 2.0;
    const double f = (d[0][0] - d[1][1]) / 2.0;
    const double g = (d[1][0] + d[0][1]) / 2.0;
    const double h = (d[1][0] - d[0][1]) / 2.0;
    const double q = std::sqrt(e * e + h * h);
    const double r = std::sqrt(f * f + g * g);
    return {q + r, std::abs(q - r)};
}

}  // namespace detail

/// Solves D * [e1_0 e2_0] = [e1 e2] in per-face orthonormal frames. The
/// singular values are frame-independent; their product is the area ratio.
inline FaceDeformation face_deformation(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1, int t) {
    const auto c0 = detail::face_frame_coords(mesh0, t);
    const auto c1 = detail::face_frame_coords(mesh1, t);
    const double det0 = c0[0][0] * c0[1][1] - c0[0][1] * c0[1][0];
    if (std::abs(det0) < 1e-15) throw InvalidInput("face_deformation: degenerate original face");
    // D = C1 * C0^{-1}
    const std::array<std::array<double, 2>, 2> inv0 = {
        {{c0[1][1] / det0, -c0[0][1] / det0}, {-c0[1][0] / det0, c0[0][0] / det0}}};
    FaceDeformation out;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            out.matrix[i][j] = c1[i][0] * inv0[0][j] + c1[i][1] * inv0[1][j];
    const auto [l1, l2] = detail::singular_values_2x2(out.matrix);
    if (l2 < 1e-15) throw InvalidInput("face_deformation: degenerate deformed face");
    out.lambda1 = l1;
    out.lambda2 = l2;
    return out;
}

/// Per-face areal |log2 J| and shape log2 R, per-edge |log2 L2/L1|, fold
/// count, and per-vertex aggregates for map output.
struct DistortionReport {
    std::vector<double> areal;        // per face
    std::vector<double> shape;        // per face
    std::vector<double> edge;         // per edge (mesh edge order)
    double areal_mean = 0.0, shape_mean = 0.0, edge_mean = 0.0;
    int fold_count = 0;
    std::vector<double> vertex_areal; // incident-face means
    std::vector<double> vertex_shape;
    std::vector<double> vertex_edge;  // incident-edge means
};

inline DistortionReport distortion_report(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1) {
    if (mesh0.face_count() != mesh1.face_count() || mesh0.vertex_count() != mesh1.vertex_count())
        throw InvalidInput("distortion_report: meshes differ in connectivity");
    const int nf = mesh0.face_count();
    const int nv = mesh0.vertex_count();
    DistortionReport rep;
    rep.areal.resize(nf);
    rep.shape.resize(nf);
    const double inv_log2 = 1.0 / std::log(2.0);
    for (int t = 0; t < nf; ++t) {
        const FaceDeformation d = face_deformation(mesh0, mesh1, t);
        rep.areal[t] = std::abs(std::log(d.area_ratio()) * inv_log2);
        rep.shape[t] = std::log(d.anisotropy()) * inv_log2;
        rep.areal_mean += rep.areal[t];
        rep.shape_mean += rep.shape[t];
        if (oriented_area(mesh1, t) <= 0.0) rep.fold_count++;
    }
    rep.areal_mean /= nf;
    rep.shape_mean /= nf;

    const auto& edges = mesh0.edges();
    rep.edge.resize(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
        const auto [i, j] = edges[e];
        const double l1 = norm(mesh0.vertices[i] - mesh0.vertices[j]);
        const double l2 = norm(mesh1.vertices[i] - mesh1.vertices[j]);
        if (l1 < 1e-15 || l2 < 1e-15) throw InvalidInput("distortion_report: degenerate edge");
        rep.edge[e] = std::abs(std::log(l2 / l1) * inv_log2);
        rep.edge_mean += rep.edge[e];
    }
    rep.edge_mean /= static_cast<double>(edges.size());

    rep.vertex_areal.assign(nv, 0.0);
    rep.vertex_shape.assign(nv, 0.0);
    rep.vertex_edge.assign(nv, 0.0);
    std::vector<int> face_deg(nv, 0), edge_deg(nv, 0);
    for (int t = 0; t < nf; ++t)
        for (int k = 0; k < 3; ++k) {
            const int v = mesh0.faces[t][k];
            rep.vertex_areal[v] += rep.areal[t];
            rep.vertex_shape[v] += rep.shape[t];
            face_deg[v]++;
        }
    for (std::size_t e = 0; e < edges.size(); ++e) {
        for (int v : {edges[e].first, edges[e].second}) {
            rep.vertex_edge[v] += rep.edge[e];
            edge_deg[v]++;
        }
    }
    for (int v = 0; v < nv; ++v) {
        if (face_deg[v] > 0) {
            rep.vertex_areal[v] /= face_deg[v];
            rep.vertex_shape[v] /= face_deg[v];
        }
        if (edge_deg[v] > 0) rep.vertex_edge[v] /= edge_deg[v];
    }
    return rep;
}

inline int fold_count(const SurfaceMesh& mesh) {
    int c = 0;
    for (int t = 0; t < mesh.face_count(); ++t)
        if (oriented_area(mesh, t) <= 0.0) c++;
    return c;
}

/// Pearson correlation over vertices.
inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InvalidInput("ncc: size mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa < 1e-300 || sbb < 1e-300) throw InvalidInput("ncc: zero-variance input");
    return sab / std::sqrt(saa * sbb);
}

inline double mae(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InvalidInput("mae: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

struct DiceResult {
    std::vector<double> per_parcel;  // NaN for parcels absent from both maps
    double mean = 0.0;               // over parcels present in either map
};

/// Set-form Dice on hard labels, per parcel.
inline DiceResult dice_hard(const ParcellationMap& a, const ParcellationMap& b) {
    const ParcellationMap ha = a.to_hard(), hb = b.to_hard();
    if (ha.parcel_count != hb.parcel_count) throw InvalidInput("dice_hard: parcel count mismatch");
    if (ha.vertex_count() != hb.vertex_count()) throw InvalidInput("dice_hard: vertex count mismatch");
    const int p = ha.parcel_count;
    std::vector<int> ca(p, 0), cb(p, 0), inter(p, 0);
    for (int i = 0; i < ha.vertex_count(); ++i) {
        ca[ha.labels[i]]++;
        cb[hb.labels[i]]++;
        if (ha.labels[i] == hb.labels[i]) inter[ha.labels[i]]++;
    }
    DiceResult out;
    out.per_parcel.resize(p);
    int present = 0;
    for (int q = 0; q < p; ++q) {
        if (ca[q] + cb[q] == 0) {
            out.per_parcel[q] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        out.per_parcel[q] = 2.0 * inter[q] / static_cast<double>(ca[q] + cb[q]);
        out.mean += out.per_parcel[q];
        present++;
    }
    if (present == 0) throw InvalidInput("dice_hard: no parcels present");
    out.mean /= present;
    return out;
}

/// One-way random-effects ICC(1,1) per vertex. subjects[s][r] is session r
/// of subject s; every subject needs the same session count.
inline std::vector<double> icc(const std::vector<std::vector<FeatureMap>>& subjects) {
    const int n = static_cast<int>(subjects.size());
    if (n < 2) throw InvalidInput("icc: need at least 2 subjects");
    const int k = static_cast<int>(subjects[0].size());
    if (k < 2) throw InvalidInput("icc: need at least 2 sessions per subject");
    const int nv = subjects[0][0].vertex_count();
    for (const auto& s : subjects) {
        if (static_cast<int>(s.size()) != k) throw InvalidInput("icc: unequal session counts");
        for (const auto& f : s)
            if (f.vertex_count() != nv || f.channel_count() != 1)
                throw InvalidInput("icc: maps must share one mesh and have one channel");
    }

    std::vector<double> out(nv);
    for (int v = 0; v < nv; ++v) {
        double grand = 0.0;
        std::vector<double> subj_mean(n, 0.0);
        for (int s = 0; s < n; ++s) {
            for (int r = 0; r < k; ++r) subj_mean[s] += subjects[s][r].at(v, 0);
            subj_mean[s] /= k;
            grand += subj_mean[s];
        }
        grand /= n;
        double ssb = 0.0, ssw = 0.0;
        for (int s = 0; s < n; ++s) {
            ssb += (subj_mean[s] - grand) * (subj_mean[s] - grand);
            for (int r = 0; r < k; ++r) {
                const double d = subjects[s][r].at(v, 0) - subj_mean[s];
                ssw += d * d;
            }
        }
        const double msb = k * ssb / (n - 1);
        const double msw = ssw / (static_cast<double>(n) * (k - 1));
        const double denom = msb + (k - 1) * msw;
        out[v] = denom < 1e-300 ? 0.0 : (msb - msw) / denom;
    }
    return out;
}

}  // namespace sugar
