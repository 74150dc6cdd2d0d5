#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"
#include "sugar/interp.hpp"
#include "sugar/mesh.hpp"

namespace sugar {

struct LevelWeights {
    double sim = 1.0, areal = 0.0, angle = 0.0, dist = 0.0, fold = 0.0, parc = 0.0;
};

/// Per-level loss weights for the multiresolution schedule.
struct LossWeights {
    int first_level = 3;
    std::vector<LevelWeights> levels;

    /// Published defaults for ico_3..ico_6.
    static LossWeights defaults() {
        LossWeights w;
        w.first_level = 3;
        w.levels = {
            {1.0, 1.5, 1.0, 2.0, 30.0, 4.0},
            {1.0, 1.5, 1.0, 2.0, 30.0, 4.0},
            {1.0, 1.5, 1.0, 2.0, 35.0, 4.0},
            {1.5, 1.5, 1.0, 2.0, 35.0, 4.0},
        };
        return w;
    }

    const LevelWeights& at(int level) const {
        const int idx = level - first_level;
        if (idx < 0 || idx >= static_cast<int>(levels.size()))
            throw InvalidInput("LossWeights: no weights for level " + std::to_string(level));
        return levels[idx];
    }

    bool covers(int level) const {
        return level >= first_level && level < first_level + static_cast<int>(levels.size());
    }

    /// Topology takes priority: the fold weight must dominate at every level.
    void validate() const {
        for (const LevelWeights& w : levels) {
            for (double v : {w.sim, w.areal, w.angle, w.dist, w.fold, w.parc})
                if (v < 0.0) throw InvalidInput("LossWeights: negative weight");
            if (!(w.fold > w.sim && w.fold > w.areal && w.fold > w.angle && w.fold > w.dist &&
                  w.fold > w.parc))
                throw InvalidInput("LossWeights: fold weight must exceed every other weight");
        }
    }
};

struct LossBreakdown {
    double sim = 0.0, areal = 0.0, angle = 0.0, dist = 0.0, fold = 0.0, parc = 0.0;
    double total = 0.0;
};

enum class Stage { Rigid, NonRigid };

/// Weighted combination; the rigid stage uses the similarity term alone.
inline LossBreakdown total_loss(Stage stage, double sim, double areal, double angle, double dist,
                                double fold, std::optional<double> parc, const LossWeights& weights,
                                int level) {
    LossBreakdown b;
    b.sim = sim;
    b.areal = areal;
    b.angle = angle;
    b.dist = dist;
    b.fold = fold;
    b.parc = parc.value_or(0.0);
    if (stage == Stage::Rigid) {
        b.total = sim;
        return b;
    }
    const LevelWeights& w = weights.at(level);
    b.total = w.sim * b.sim + w.areal * b.areal + w.angle * b.angle + w.dist * b.dist +
              w.fold * b.fold + (parc ? w.parc * b.parc : 0.0);
    return b;
}

// ---------------------------------------------------------------------------
// Individual losses. The *_raw overloads operate on bare vertex/face arrays
// so small open patches can exercise the formulas directly.
// ---------------------------------------------------------------------------

inline double areal_loss_raw(const std::vector<Vec3>& v0, const std::vector<Vec3>& v1,
                             const std::vector<FaceTri>& faces) {
    double acc = 0.0;
    for (const FaceTri& f : faces) {
        const double a0 = std::abs(oriented_area(v0[f[0]], v0[f[1]], v0[f[2]]));
        if (a0 < 1e-15) throw InvalidInput("areal_loss: degenerate reference face");
        const double a1 = std::abs(oriented_area(v1[f[0]], v1[f[1]], v1[f[2]]));
        acc += std::abs(1.0 - a1 / a0);
    }
    return acc / static_cast<double>(faces.size());
}

inline double corner_angle(const Vec3& corner, const Vec3& u_end, const Vec3& v_end) {
    const Vec3 u = u_end - corner, v = v_end - corner;
    return std::atan2(norm(cross(u, v)), dot(u, v));
}

inline double angular_loss_raw(const std::vector<Vec3>& v0, const std::vector<Vec3>& v1,
                               const std::vector<FaceTri>& faces) {
    double acc = 0.0;
    for (const FaceTri& f : faces) {
        for (int k = 0; k < 3; ++k) {
            const double t0 = corner_angle(v0[f[k]], v0[f[(k + 1) % 3]], v0[f[(k + 2) % 3]]);
            if (t0 < 1e-12) throw InvalidInput("angular_loss: degenerate reference corner");
            const double t1 = corner_angle(v1[f[k]], v1[f[(k + 1) % 3]], v1[f[(k + 2) % 3]]);
            acc += std::abs(1.0 - t1 / t0);
        }
    }
    return acc / (3.0 * static_cast<double>(faces.size()));
}

inline double fold_loss_raw(const std::vector<Vec3>& v0, const std::vector<Vec3>& v1,
                            const std::vector<FaceTri>& faces) {
    double acc = 0.0;
    for (const FaceTri& f : faces) {
        const double d0 = oriented_area(v0[f[0]], v0[f[1]], v0[f[2]]);
        if (d0 <= 0.0) throw InvalidInput("fold_loss: reference face with non-positive area");
        const double d1 = oriented_area(v1[f[0]], v1[f[1]], v1[f[2]]);
        if (d1 <= 0.0) acc += std::abs(d1 - d0);
    }
    return acc / static_cast<double>(faces.size());
}

inline double distance_loss_raw(const std::vector<Vec3>& v0, const std::vector<Vec3>& v1,
                                const std::vector<std::vector<int>>& rings, double mean_edge0) {
    double acc = 0.0;
    const int n = static_cast<int>(v0.size());
    for (int i = 0; i < n; ++i) {
        Vec3 b0{}, b1{};
        for (int j : rings[i]) {
            b0 += v0[j];
            b1 += v1[j];
        }
        const double inv = 1.0 / static_cast<double>(rings[i].size());
        const double d0 = norm(v0[i] - b0 * inv);
        const double d1 = norm(v1[i] - b1 * inv);
        acc += std::abs(d1 - d0);
    }
    return acc / (static_cast<double>(n) * mean_edge0);
}

namespace detail {
inline void check_same_connectivity(const SurfaceMesh& m0, const SurfaceMesh& m1) {
    if (m0.vertex_count() != m1.vertex_count() || m0.face_count() != m1.face_count())
        throw InvalidInput("loss: meshes differ in connectivity");
}
}  // namespace detail

inline double areal_loss(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1) {
    detail::check_same_connectivity(mesh0, mesh1);
    return areal_loss_raw(mesh0.vertices, mesh1.vertices, mesh0.faces);
}

inline double angular_loss(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1) {
    detail::check_same_connectivity(mesh0, mesh1);
    return angular_loss_raw(mesh0.vertices, mesh1.vertices, mesh0.faces);
}

inline double fold_loss(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1) {
    detail::check_same_connectivity(mesh0, mesh1);
    return fold_loss_raw(mesh0.vertices, mesh1.vertices, mesh0.faces);
}

inline double distance_loss(const SurfaceMesh& mesh0, const SurfaceMesh& mesh1) {
    detail::check_same_connectivity(mesh0, mesh1);
    std::vector<std::vector<int>> rings(mesh0.vertex_count());
    for (int i = 0; i < mesh0.vertex_count(); ++i) rings[i] = mesh0.one_ring(i);
    return distance_loss_raw(mesh0.vertices, mesh1.vertices, rings, mesh0.mean_edge_length());
}

/// Mean squared feature error of the moved mesh against the fixed sphere,
/// sampling the fixed features at each moved vertex.
inline double sim_loss(const SurfaceMesh& moved_mesh, const FeatureMap& moving_features,
                       const FaceLocator& fixed_locator, const FeatureMap& fixed_features) {
    if (moving_features.channels != fixed_features.channels)
        throw InvalidInput("sim_loss: channel sets differ");
    if (moving_features.vertex_count() != moved_mesh.vertex_count())
        throw InvalidInput("sim_loss: features do not match the moved mesh");
    const int n = moved_mesh.vertex_count(), c = moving_features.channel_count();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const BarycentricHit hit = fixed_locator.locate(moved_mesh.vertices[i]);
        const std::vector<double> y = fixed_locator.interpolate(fixed_features, hit);
        double e = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const double d = moving_features.at(i, ch) - y[ch];
            e += d * d;
        }
        acc += e / c;
    }
    return acc / n;
}

/// Soft Dice 2*sum(ab)/(sum(a)+sum(b)) on probability rows for one parcel.
inline double parc_dice(const ParcellationMap& moved_parc, const ParcellationMap& fixed_parc,
                        int parcel) {
    if (moved_parc.parcel_count != fixed_parc.parcel_count)
        throw InvalidInput("parc_dice: parcel count mismatch");
    if (parcel < 0 || parcel >= moved_parc.parcel_count)
        throw InvalidInput("parc_dice: parcel index out of range");
    const ParcellationMap a = moved_parc.to_soft(), b = fixed_parc.to_soft();
    if (a.vertex_count() != b.vertex_count()) throw InvalidInput("parc_dice: vertex count mismatch");
    const int n = a.vertex_count(), p = a.parcel_count;
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (int i = 0; i < n; ++i) {
        inter += a.soft[i * p + parcel] * b.soft[i * p + parcel];
        sa += a.soft[i * p + parcel];
        sb += b.soft[i * p + parcel];
    }
    if (sa + sb < 1e-300) return 0.0;
    return 2.0 * inter / (sa + sb);
}

inline double parc_loss(const ParcellationMap& moved_parc, const ParcellationMap& fixed_parc) {
    double acc = 0.0;
    for (int q = 0; q < moved_parc.parcel_count; ++q)
        acc += 1.0 - parc_dice(moved_parc, fixed_parc, q);
    return acc / moved_parc.parcel_count;
}

// ---------------------------------------------------------------------------
// Differentiable non-rigid objective.
//
// Moved positions are p_i = R(delta_i) * q_i over a fixed reference
// configuration q (the state at level entry). Interpolation face
// assignments are frozen per gradient evaluation; the optimizer re-locates
// between steps.
// ---------------------------------------------------------------------------

struct LossGradient {
    LossBreakdown breakdown;
    std::vector<EulerTriple> d_angles;
};

class NonrigidObjective {
public:
    /// `base` carries the positions the Euler field applies to; `reference`
    /// supplies the undeformed areas, corner angles and ring distances the
    /// regularizers compare against. Passing the pristine icosphere as the
    /// reference charges the losses for the total accumulated distortion.
    NonrigidObjective(const SurfaceMesh& base, const FeatureMap& moving,
                      const FaceLocator& fixed_locator, const FeatureMap& fixed_features,
                      LevelWeights weights, const ParcellationMap* moving_parc = nullptr,
                      const ParcellationMap* fixed_parc = nullptr,
                      const SurfaceMesh* reference = nullptr)
        : base_(&base),
          moving_(&moving),
          fixed_loc_(&fixed_locator),
          fixed_feat_(&fixed_features),
          weights_(weights) {
        if (moving.channels != fixed_features.channels)
            throw InvalidInput("NonrigidObjective: channel sets differ");
        if (moving.vertex_count() != base.vertex_count())
            throw InvalidInput("NonrigidObjective: features do not match the base mesh");
        if ((moving_parc == nullptr) != (fixed_parc == nullptr))
            throw InvalidInput("NonrigidObjective: parcellations must come in pairs");
        if (moving_parc) {
            moving_parc_soft_ = moving_parc->to_soft();
            fixed_parc_soft_ = fixed_parc->to_soft();
            if (moving_parc_soft_.parcel_count != fixed_parc_soft_.parcel_count)
                throw InvalidInput("NonrigidObjective: parcel count mismatch");
            if (moving_parc_soft_.vertex_count() != base.vertex_count())
                throw InvalidInput("NonrigidObjective: moving parcellation size mismatch");
            if (fixed_parc_soft_.vertex_count() != fixed_locator.mesh().vertex_count())
                throw InvalidInput("NonrigidObjective: fixed parcellation size mismatch");
            has_parc_ = true;
        }

        const SurfaceMesh& ref = reference ? *reference : base;
        if (ref.vertex_count() != base.vertex_count() || ref.face_count() != base.face_count())
            throw InvalidInput("NonrigidObjective: reference connectivity mismatch");
        eps_edge_ = ref.mean_edge_length();
        const int nf = ref.face_count();
        area0_.resize(nf);
        angle0_.resize(nf);
        for (int t = 0; t < nf; ++t) {
            area0_[t] = oriented_area(ref, t);
            if (area0_[t] <= 0.0)
                throw InvalidInput("NonrigidObjective: reference face with non-positive area");
            const FaceTri& f = ref.faces[t];
            for (int k = 0; k < 3; ++k)
                angle0_[t][k] = corner_angle(ref.vertices[f[k]], ref.vertices[f[(k + 1) % 3]],
                                             ref.vertices[f[(k + 2) % 3]]);
        }
        // Same arithmetic as dist_component so the undeformed residual is
        // exactly zero (a one-ulp mismatch would flip kink subgradients).
        const int nv = ref.vertex_count();
        ringdist0_.resize(nv);
        for (int i = 0; i < nv; ++i) {
            Vec3 b{};
            for (int j : ref.one_ring(i)) b += ref.vertices[j];
            const double inv = 1.0 / static_cast<double>(ref.one_ring(i).size());
            ringdist0_[i] = norm(ref.vertices[i] - b * inv);
        }
    }

    const SurfaceMesh& base() const { return *base_; }
    double mean_edge0() const { return eps_edge_; }
    bool has_parcellations() const { return has_parc_; }

    std::vector<Vec3> moved_positions(const EulerField& delta) const {
        const int n = base_->vertex_count();
        if (!(delta.size() == n || delta.size() == 1))
            throw InvalidInput("NonrigidObjective: field size must be 1 or the vertex count");
        std::vector<Vec3> p(n);
        if (delta.size() == 1) {
            const Mat3 r = rotation_from_euler(delta.angles[0][0], delta.angles[0][1],
                                               delta.angles[0][2]);
            for (int i = 0; i < n; ++i) p[i] = r * base_->vertices[i];
        } else {
            for (int i = 0; i < n; ++i) {
                const auto& a = delta.angles[i];
                p[i] = rotation_from_euler(a[0], a[1], a[2]) * base_->vertices[i];
            }
        }
        return p;
    }

    /// Containing faces of the moved vertices on the fixed sphere.
    std::vector<int> locate_faces(const std::vector<Vec3>& moved) const {
        std::vector<int> faces(moved.size());
        for (std::size_t i = 0; i < moved.size(); ++i)
            faces[i] = fixed_loc_->locate(normalized(moved[i])).face;
        return faces;
    }

    /// Full loss with faces re-located at the current configuration.
    LossBreakdown evaluate(const EulerField& delta) const {
        const std::vector<Vec3> p = moved_positions(delta);
        return evaluate_at(p, locate_faces(p));
    }

    /// Loss with a caller-supplied (frozen) face assignment.
    LossBreakdown evaluate_frozen(const EulerField& delta, const std::vector<int>& faces) const {
        return evaluate_at(moved_positions(delta), faces);
    }

    LossBreakdown evaluate_at(const std::vector<Vec3>& p, const std::vector<int>& sim_faces) const {
        LossBreakdown b;
        b.sim = sim_component(p, sim_faces, nullptr);
        b.areal = areal_loss_raw(base_->vertices, p, base_->faces);
        b.angle = angular_loss_raw(base_->vertices, p, base_->faces);
        b.dist = dist_component(p, nullptr);
        b.fold = fold_component(p, nullptr);
        std::optional<double> parc;
        if (has_parc_) parc = parc_component(p, sim_faces, nullptr);
        LossWeights w;
        w.first_level = 0;
        w.levels = {weights_};
        return total_loss(Stage::NonRigid, b.sim, b.areal, b.angle, b.dist, b.fold, parc, w, 0);
    }

    /// Analytic gradient of the weighted total with respect to every Euler
    /// angle, with interpolation faces frozen to `sim_faces`.
    LossGradient gradient(const EulerField& delta, const std::vector<int>& sim_faces) const {
        const int n = base_->vertex_count();
        const std::vector<Vec3> p = moved_positions(delta);
        std::vector<Vec3> g(n, Vec3{});  // d total / d p_i

        // Zero-weight components are skipped entirely; they cannot move the
        // total and the rigid stage runs sim-only.
        LossBreakdown b;
        std::vector<Vec3> comp(n);
        auto add = [&](double weight, auto&& fn) -> double {
            if (weight == 0.0) return 0.0;
            std::fill(comp.begin(), comp.end(), Vec3{});
            const double value = fn(&comp);
            axpy(g, comp, weight);
            return value;
        };
        b.sim = add(weights_.sim, [&](std::vector<Vec3>* c) { return sim_component(p, sim_faces, c); });
        b.areal = add(weights_.areal, [&](std::vector<Vec3>* c) { return areal_component(p, c); });
        b.angle = add(weights_.angle, [&](std::vector<Vec3>* c) { return angle_component(p, c); });
        b.dist = add(weights_.dist, [&](std::vector<Vec3>* c) { return dist_component(p, c); });
        b.fold = add(weights_.fold, [&](std::vector<Vec3>* c) { return fold_component(p, c); });

        std::optional<double> parc;
        if (has_parc_ && weights_.parc != 0.0) {
            std::fill(comp.begin(), comp.end(), Vec3{});
            parc = parc_component(p, sim_faces, &comp);
            axpy(g, comp, weights_.parc);
        }

        LossGradient out;
        LossWeights w;
        w.first_level = 0;
        w.levels = {weights_};
        out.breakdown =
            total_loss(Stage::NonRigid, b.sim, b.areal, b.angle, b.dist, b.fold, parc, w, 0);

        // Chain through p_i = R(delta_i) * q_i.
        if (delta.size() == 1) {
            Mat3 da, db, dg;
            rotation_derivatives(delta.angles[0][0], delta.angles[0][1], delta.angles[0][2], da, db,
                                 dg);
            EulerTriple acc{0.0, 0.0, 0.0};
            for (int i = 0; i < n; ++i) {
                const Vec3& q = base_->vertices[i];
                acc[0] += dot(g[i], da * q);
                acc[1] += dot(g[i], db * q);
                acc[2] += dot(g[i], dg * q);
            }
            out.d_angles.push_back(acc);
        } else {
            out.d_angles.resize(n);
            for (int i = 0; i < n; ++i) {
                Mat3 da, db, dg;
                rotation_derivatives(delta.angles[i][0], delta.angles[i][1], delta.angles[i][2], da,
                                     db, dg);
                const Vec3& q = base_->vertices[i];
                out.d_angles[i] = {dot(g[i], da * q), dot(g[i], db * q), dot(g[i], dg * q)};
            }
        }
        return out;
    }

private:
    static void axpy(std::vector<Vec3>& y, const std::vector<Vec3>& x, double a) {
        if (a == 0.0) return;
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i] * a;
    }

    /// Interpolation of fixed-mesh rows at point p against frozen face t:
    /// value and, when requested, the gradient of each channel w.r.t. p.
    struct InterpDiff {
        std::array<int, 3> verts;
        std::array<double, 3> weights;
        // dw_k/dv_int and the map dv_int/dp are combined lazily by callers.
        std::array<Vec3, 3> dw_dvint;
        Vec3 normal;     // unit, outward-signed
        double s = 1.0;  // plane scale <v1,n>/<p,n>
        double pn = 1.0; // <p, n>
    };

    InterpDiff interp_setup(const Vec3& p, int t) const {
        const SurfaceMesh& fm = fixed_loc_->mesh();
        const FaceTri& f = fm.faces[t];
        const Vec3& a = fm.vertices[f[0]];
        const Vec3& b = fm.vertices[f[1]];
        const Vec3& c = fm.vertices[f[2]];
        Vec3 n = normalized(cross(b - a, c - a));
        if (dot(n, a + b + c) < 0.0) n = -n;
        InterpDiff d;
        d.verts = {f[0], f[1], f[2]};
        d.normal = n;
        d.pn = dot(p, n);
        if (std::abs(d.pn) < 1e-300) throw DivergenceError("interpolation ray parallel to face");
        d.s = dot(a, n) / d.pn;
        const Vec3 v = p * d.s;

        const Vec3 kab = cross(c - b, a - b);  // weight of a, scaled
        const Vec3 kbc = cross(a - c, b - c);
        const Vec3 kca = cross(b - a, c - a);
        const double wa = dot(cross(c - b, v - b), kab);
        const double wb = dot(cross(a - c, v - c), kbc);
        const double wc = dot(cross(b - a, v - a), kca);
        const double sum = wa + wb + wc;
        d.weights = {wa / sum, wb / sum, wc / sum};
        // The weight sum is constant over the plane, so dw = d(omega)/sum.
        d.dw_dvint = {cross(kab, c - b) / sum, cross(kbc, a - c) / sum, cross(kca, b - a) / sum};
        return d;
    }

    double sim_component(const std::vector<Vec3>& p, const std::vector<int>& faces,
                         std::vector<Vec3>* grad) const {
        const int n = base_->vertex_count(), c = moving_->channel_count();
        if (static_cast<int>(faces.size()) != n)
            throw InvalidInput("sim: face assignment size mismatch");
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const InterpDiff d = interp_setup(p[i], faces[i]);
            Vec3 du{};  // sum over channels of residual-weighted value gradients w.r.t. v_int
            double e = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                double y = 0.0;
                for (int k = 0; k < 3; ++k) y += d.weights[k] * fixed_feat_->at(d.verts[k], ch);
                const double r = moving_->at(i, ch) - y;
                e += r * r;
                if (grad) {
                    Vec3 uy{};
                    for (int k = 0; k < 3; ++k) uy += d.dw_dvint[k] * fixed_feat_->at(d.verts[k], ch);
                    du += uy * (-2.0 * r / (static_cast<double>(n) * c));
                }
            }
            acc += e / c;
            if (grad) {
                // dv_int/dp = s (I - p n^T / <p,n>); transpose applied to du.
                const Vec3 gp = (du - d.normal * (dot(p[i], du) / d.pn)) * d.s;
                (*grad)[i] += gp;
            }
        }
        return acc / n;
    }

    /// d(oriented area)/d(vertices), shared by areal and fold terms.
    static void oriented_area_grad(const Vec3& a, const Vec3& b, const Vec3& c, Vec3& ga, Vec3& gb,
                                   Vec3& gc, double& area) {
        const Vec3 u = cross(b - a, c - a);
        const Vec3 cen = (a + b + c) / 3.0;
        const double cl = norm(cen);
        const Vec3 nh = cen / cl;
        area = 0.5 * dot(u, nh);
        const Vec3 un = (u - nh * dot(u, nh)) / (3.0 * cl);  // centroid-normal part
        ga = (cross(b - c, nh) + un) * 0.5;
        gb = (cross(c - a, nh) + un) * 0.5;
        gc = (cross(a - b, nh) + un) * 0.5;
    }

    double areal_component(const std::vector<Vec3>& p, std::vector<Vec3>* grad) const {
        const int nf = base_->face_count();
        double acc = 0.0;
        for (int t = 0; t < nf; ++t) {
            const FaceTri& f = base_->faces[t];
            Vec3 ga, gb, gc;
            double delta;
            oriented_area_grad(p[f[0]], p[f[1]], p[f[2]], ga, gb, gc, delta);
            const double a0 = std::abs(area0_[t]);
            const double ratio = std::abs(delta) / a0;
            const double resid = 1.0 - ratio;
            acc += std::abs(resid);
            // Subgradient 0 at the kink; the threshold absorbs rounding noise
            // from isometric reference transforms.
            if (grad && std::abs(resid) > 1e-12) {
                const double sd = delta >= 0.0 ? 1.0 : -1.0;
                const double coef = (resid > 0.0 ? -1.0 : 1.0) * sd / (a0 * nf);
                (*grad)[f[0]] += ga * coef;
                (*grad)[f[1]] += gb * coef;
                (*grad)[f[2]] += gc * coef;
            }
        }
        return acc / nf;
    }

    double angle_component(const std::vector<Vec3>& p, std::vector<Vec3>* grad) const {
        const int nf = base_->face_count();
        double acc = 0.0;
        for (int t = 0; t < nf; ++t) {
            const FaceTri& f = base_->faces[t];
            for (int k = 0; k < 3; ++k) {
                const Vec3& corner = p[f[k]];
                const Vec3& e1 = p[f[(k + 1) % 3]];
                const Vec3& e2 = p[f[(k + 2) % 3]];
                const Vec3 u = e1 - corner, v = e2 - corner;
                const Vec3 w = cross(u, v);
                const double s = norm(w), cth = dot(u, v);
                const double theta = std::atan2(s, cth);
                const double t0 = angle0_[t][k];
                const double resid = 1.0 - theta / t0;
                acc += std::abs(resid);
                if (grad && std::abs(resid) > 1e-12 && s > 1e-14) {
                    const double denom = s * s + cth * cth;
                    const Vec3 dth_du = (cross(v, w) * (cth / s) - v * s) / denom;
                    const Vec3 dth_dv = (cross(w, u) * (cth / s) - u * s) / denom;
                    const double coef = (resid > 0.0 ? -1.0 : 1.0) / (t0 * 3.0 * nf);
                    (*grad)[f[(k + 1) % 3]] += dth_du * coef;
                    (*grad)[f[(k + 2) % 3]] += dth_dv * coef;
                    (*grad)[f[k]] += (dth_du + dth_dv) * (-coef);
                }
            }
        }
        return acc / (3.0 * nf);
    }

    double dist_component(const std::vector<Vec3>& p, std::vector<Vec3>* grad) const {
        const int n = base_->vertex_count();
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto& ring = base_->one_ring(i);
            Vec3 b{};
            for (int j : ring) b += p[j];
            const double inv = 1.0 / static_cast<double>(ring.size());
            const Vec3 diff = p[i] - b * inv;
            const double d1 = norm(diff);
            const double resid = d1 - ringdist0_[i];
            acc += std::abs(resid);
            if (grad && std::abs(resid) > 1e-12 && d1 > 1e-30) {
                const double coef = (resid >= 0.0 ? 1.0 : -1.0) / (n * eps_edge_ * d1);
                const Vec3 dir = diff * coef;
                (*grad)[i] += dir;
                for (int j : ring) (*grad)[j] -= dir * inv;
            }
        }
        return acc / (n * eps_edge_);
    }

    double fold_component(const std::vector<Vec3>& p, std::vector<Vec3>* grad) const {
        const int nf = base_->face_count();
        double acc = 0.0;
        for (int t = 0; t < nf; ++t) {
            const FaceTri& f = base_->faces[t];
            Vec3 ga, gb, gc;
            double delta;
            oriented_area_grad(p[f[0]], p[f[1]], p[f[2]], ga, gb, gc, delta);
            if (delta > 0.0) continue;
            acc += std::abs(delta - area0_[t]);
            if (grad) {
                const double coef = -1.0 / nf;  // d|delta - delta0|/d delta, delta <= 0 < delta0
                (*grad)[f[0]] += ga * coef;
                (*grad)[f[1]] += gb * coef;
                (*grad)[f[2]] += gc * coef;
            }
        }
        return acc / nf;
    }

    double parc_component(const std::vector<Vec3>& p, const std::vector<int>& faces,
                          std::vector<Vec3>* grad) const {
        const int n = base_->vertex_count();
        const int np = moving_parc_soft_.parcel_count;
        // First pass: interpolated fixed probabilities and per-parcel sums.
        std::vector<double> b_rows(static_cast<std::size_t>(n) * np);
        std::vector<InterpDiff> diffs(n);
        std::vector<double> inter(np, 0.0), sa(np, 0.0), sb(np, 0.0);
        for (int i = 0; i < n; ++i) {
            diffs[i] = interp_setup(p[i], faces[i]);
            for (int q = 0; q < np; ++q) {
                double y = 0.0;
                for (int k = 0; k < 3; ++k)
                    y += diffs[i].weights[k] * fixed_parc_soft_.soft[diffs[i].verts[k] * np + q];
                b_rows[i * np + q] = y;
                const double a = moving_parc_soft_.soft[i * np + q];
                inter[q] += a * y;
                sa[q] += a;
                sb[q] += y;
            }
        }
        double acc = 0.0;
        std::vector<double> dice(np, 0.0);
        for (int q = 0; q < np; ++q) {
            const double denom = sa[q] + sb[q];
            dice[q] = denom < 1e-300 ? 0.0 : 2.0 * inter[q] / denom;
            acc += 1.0 - dice[q];
        }
        if (grad) {
            for (int i = 0; i < n; ++i) {
                Vec3 du{};
                for (int q = 0; q < np; ++q) {
                    const double denom = sa[q] + sb[q];
                    if (denom < 1e-300) continue;
                    const double a = moving_parc_soft_.soft[i * np + q];
                    // d(1/P sum (1-dice))/db_iq
                    const double db = -(2.0 * a - dice[q]) / (denom * np);
                    Vec3 uy{};
                    for (int k = 0; k < 3; ++k)
                        uy += diffs[i].dw_dvint[k] * fixed_parc_soft_.soft[diffs[i].verts[k] * np + q];
                    du += uy * db;
                }
                const Vec3 gp = (du - diffs[i].normal * (dot(p[i], du) / diffs[i].pn)) * diffs[i].s;
                (*grad)[i] += gp;
            }
        }
        return acc / np;
    }

    const SurfaceMesh* base_;
    const FeatureMap* moving_;
    const FaceLocator* fixed_loc_;
    const FeatureMap* fixed_feat_;
    LevelWeights weights_;
    bool has_parc_ = false;
    ParcellationMap moving_parc_soft_, fixed_parc_soft_;
    double eps_edge_ = 1.0;
    std::vector<double> area0_;
    std::vector<std::array<double, 3>> angle0_;
    std::vector<double> ringdist0_;
};

}  // namespace sugar
