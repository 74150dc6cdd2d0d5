#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/interp.hpp"
#include "sugar/loss.hpp"
#include "sugar/mesh.hpp"
#include "sugar/metrics.hpp"
#include "sugar/net.hpp"
#include "sugar/rng.hpp"
#include "sugar/synth.hpp"

namespace sugar {

enum class Mode { Direct, Learned };

struct RegistrationConfig {
    std::vector<int> levels = {3, 4, 5, 6};
    Mode mode = Mode::Direct;
    LossWeights weights = LossWeights::defaults();
    std::vector<int> direct_steps = {100, 100, 60, 40};  // per level
    std::vector<double> direct_lr = {0.2, 0.2, 0.2, 0.2};
    bool line_search = true;
    int max_halvings = 20;
    int grad_smooth_passes = 6;  // ring-smoothing of the descent direction
    bool enforce_fold_priority = true;  // relax only for ablation studies
    int kappa = 8;
    int pe_frequencies = 4;
    std::uint64_t seed = 0;
    // Rigid stage: -1 runs it at the first non-rigid level.
    int rigid_level = -1;
    int rigid_steps = 200;
    double rigid_lr = 0.1;
    bool skip_rigid = false;
    // Learned mode: one per-vertex model per level, plus an optional global
    // model for the rigid stage (direct rigid is used when absent).
    const std::vector<ModelParams>* models = nullptr;
    const ModelParams* rigid_model = nullptr;

    void validate(const IcoHierarchy& hier) const {
        if (levels.empty()) throw InvalidInput("RegistrationConfig: empty level list");
        for (std::size_t i = 1; i < levels.size(); ++i)
            if (levels[i] <= levels[i - 1])
                throw InvalidInput("RegistrationConfig: levels must be strictly increasing");
        if (levels.back() > hier.max_level())
            throw InvalidInput("RegistrationConfig: hierarchy too shallow for finest level");
        if (enforce_fold_priority) weights.validate();
        for (int l : levels)
            if (!weights.covers(l)) throw InvalidInput("RegistrationConfig: weights missing for a level");
        if (mode == Mode::Direct) {
            if (direct_steps.size() < levels.size() || direct_lr.size() < levels.size())
                throw InvalidInput("RegistrationConfig: per-level step counts or rates missing");
        } else {
            if (!models || models->size() != levels.size())
                throw InvalidInput("RegistrationConfig: learned mode needs one model per level");
            for (std::size_t i = 0; i < levels.size(); ++i) {
                const ModelParams& m = (*models)[i];
                if (m.config.level != levels[i] || m.config.output_mode != OutputMode::PerVertex)
                    throw InvalidInput("RegistrationConfig: model does not match its level");
            }
        }
    }
};

struct RigidResult {
    EulerTriple angles{};
    SurfaceMesh moved;
    double sim_before = 0.0;
    double sim_after = 0.0;
};

struct LevelTrace {
    int level = 0;
    LossBreakdown entry, exit;
    std::vector<double> step_totals;  // recorded total after every accepted step
    double seconds = 0.0;
};

struct RegistrationResult {
    EulerTriple rigid_angles{};
    std::vector<int> levels;
    std::vector<EulerField> level_fields;  // per-level increments
    EulerField total_field;                // accumulated field at the finest level
    SurfaceMesh moved;                     // finest-level moved sphere
    FeatureMap moved_features;             // moving features riding on `moved`
    std::vector<LevelTrace> trace;
    DistortionReport distortion;
    int fold_count = 0;
    bool success = false;
    double rigid_seconds = 0.0;
    double total_seconds = 0.0;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline FeatureMap resample_zscore(const FaceLocator& src, const FeatureMap& feats,
                                  const SurfaceMesh& dst) {
    FeatureMap out = resample(src, feats, dst);
    out.zscore();
    return out;
}

/// Soft-probability resampling of a parcellation onto another sphere.
inline ParcellationMap resample_parcellation(const FaceLocator& src, const ParcellationMap& parc,
                                             const SurfaceMesh& dst) {
    const ParcellationMap soft = parc.to_soft();
    FeatureMap rows;
    rows.mesh_key = src.mesh().key();
    rows.channels.resize(soft.parcel_count, "p");
    rows.values = soft.soft;
    const FeatureMap out = resample(src, rows, dst);
    ParcellationMap result;
    result.parcel_count = soft.parcel_count;
    result.soft = out.values;
    return result;
}

inline void solve3(const Mat3& a, const Vec3& rhs, Vec3& x) {
    const double det = a.det();
    if (std::abs(det) < 1e-30) throw DivergenceError("singular 3x3 system");
    Mat3 m = a;
    // Cramer's rule.
    auto col_swap = [&](int c, const Vec3& v) {
        Mat3 r = m;
        r.m[0][c] = v.x;
        r.m[1][c] = v.y;
        r.m[2][c] = v.z;
        return r.det() / det;
    };
    x = {col_swap(0, rhs), col_swap(1, rhs), col_swap(2, rhs)};
}

/// One-ring Jacobi averaging of a per-vertex angle field, applied
/// `passes` times componentwise.
inline std::vector<EulerTriple> smooth_field(const SurfaceMesh& mesh, std::vector<EulerTriple> g,
                                             int passes) {
    const int n = mesh.vertex_count();
    std::vector<EulerTriple> next(n);
    for (int pass = 0; pass < passes; ++pass) {
        for (int i = 0; i < n; ++i) {
            EulerTriple acc = g[i];
            const auto& ring = mesh.one_ring(i);
            for (int j : ring)
                for (int k = 0; k < 3; ++k) acc[k] += g[j][k];
            const double inv = 1.0 / (1.0 + static_cast<double>(ring.size()));
            for (int k = 0; k < 3; ++k) next[i][k] = acc[k] * inv;
        }
        std::swap(g, next);
    }
    return g;
}

/// Gradient descent with backtracking on the true (re-located) loss, so the
/// recorded trace is monotone non-increasing by construction.
///
/// The raw per-vertex gradient is spatially rough, and along rough
/// directions the |1 - ratio| regularizers grow faster than the similarity
/// falls (they are kinked at the undeformed state). The descent direction is
/// therefore ring-smoothed first; the raw gradient stays available as a
/// fallback direction once the smoothed one stops improving.
inline std::pair<EulerField, LevelTrace> optimize_level(const NonrigidObjective& obj,
                                                        EulerField delta, int steps, double lr,
                                                        bool line_search, int max_halvings,
                                                        int smooth_passes) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = obj.base().vertex_count();
    LevelTrace trace;
    LossBreakdown cur = obj.evaluate(delta);
    if (!std::isfinite(cur.total)) throw DivergenceError("non-finite loss at level entry");
    trace.entry = cur;
    trace.step_totals.push_back(cur.total);

    double step = lr;
    for (int it = 0; it < steps; ++it) {
        const std::vector<Vec3> p = obj.moved_positions(delta);
        const std::vector<int> faces = obj.locate_faces(p);
        const LossGradient g = obj.gradient(delta, faces);
        if (!std::isfinite(g.breakdown.total)) throw DivergenceError("non-finite loss");

        if (!line_search) {
            const std::vector<EulerTriple> dir =
                smooth_passes > 0 ? smooth_field(obj.base(), g.d_angles, smooth_passes)
                                  : g.d_angles;
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < 3; ++k) delta.angles[i][k] -= step * dir[i][k];
            cur = obj.evaluate(delta);
            if (!std::isfinite(cur.total)) throw DivergenceError("non-finite loss");
            trace.step_totals.push_back(cur.total);
            continue;
        }

        // Progressively less smoothing until a direction improves.
        std::vector<int> candidates;
        for (int sp = smooth_passes; sp > 0; sp /= 2) candidates.push_back(sp);
        candidates.push_back(0);

        bool accepted = false;
        for (int sp : candidates) {
            const std::vector<EulerTriple> dir =
                sp > 0 ? smooth_field(obj.base(), g.d_angles, sp) : g.d_angles;
            double s = step;
            for (int h = 0; h <= max_halvings; ++h) {
                EulerField trial = delta;
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < 3; ++k) trial.angles[i][k] -= s * dir[i][k];
                const LossBreakdown t = obj.evaluate(trial);
                if (std::isfinite(t.total) && t.total < cur.total) {
                    delta = std::move(trial);
                    cur = t;
                    accepted = true;
                    step = std::min(s * 2.0, lr * 8.0);
                    break;
                }
                s *= 0.5;
            }
            if (accepted) break;
        }
        trace.step_totals.push_back(cur.total);
        if (!accepted) break;  // no improving step within the search budget
    }
    trace.exit = cur;
    trace.seconds = seconds_since(t0);
    return {std::move(delta), std::move(trace)};
}

}  // namespace detail

/// Global 3-angle alignment. Direct mode probes a small fixed start grid,
/// descends with backtracking line search and finishes with a few damped
/// Newton iterations on the 3x3 system.
inline RigidResult rigid_register(const SurfaceMesh& moving_mesh, const FeatureMap& moving_feats,
                                  const SurfaceMesh& fixed_mesh, const FeatureMap& fixed_feats,
                                  const RegistrationConfig& cfg,
                                  const IcoHierarchy* hier = nullptr) {
    FeatureMap m = moving_feats;
    if (!m.normalized) m.zscore();
    FeatureMap f = fixed_feats;
    if (!f.normalized) f.zscore();
    const FaceLocator loc(fixed_mesh, cfg.kappa);

    if (cfg.rigid_model) {
        if (!hier) throw InvalidInput("rigid_register: learned rigid mode needs a hierarchy");
        if (cfg.rigid_model->config.output_mode != OutputMode::Global)
            throw InvalidInput("rigid_register: rigid model must use global output");
        const int pe_ch = 2 * (2 * cfg.pe_frequencies + 1);
        const auto x = assemble_input(positional_features(moving_mesh.vertices, cfg.pe_frequencies),
                                      pe_ch, m,
                                      positional_features(fixed_mesh.vertices, cfg.pe_frequencies),
                                      f);
        const EulerField ang = sgat_forward(*cfg.rigid_model, *hier, x);
        RigidResult out;
        out.angles = ang.angles[0];
        out.sim_before = sim_loss(moving_mesh, m, loc, f);
        out.moved = warp(moving_mesh, ang);
        out.sim_after = sim_loss(out.moved, m, loc, f);
        return out;
    }

    const NonrigidObjective obj(moving_mesh, m, loc, f, LevelWeights{1, 0, 0, 0, 0, 0});
    auto eval = [&](const EulerTriple& a) {
        EulerField fld;
        fld.angles.push_back(a);
        return obj.evaluate(fld).total;
    };
    auto grad = [&](const EulerTriple& a) {
        EulerField fld;
        fld.angles.push_back(a);
        const auto p = obj.moved_positions(fld);
        return obj.gradient(fld, obj.locate_faces(p)).d_angles[0];
    };

    // Probe a fixed start grid, descend from the best probe.
    const double r = 0.15;
    const std::vector<EulerTriple> starts = {{0, 0, 0},  {r, 0, 0},  {-r, 0, 0}, {0, r, 0},
                                             {0, -r, 0}, {0, 0, r},  {0, 0, -r}};
    EulerTriple best = starts[0];
    double best_val = eval(best);
    const double sim_before = best_val;
    for (std::size_t i = 1; i < starts.size(); ++i) {
        const double v = eval(starts[i]);
        if (v < best_val) {
            best_val = v;
            best = starts[i];
        }
    }

    double step = cfg.rigid_lr;
    for (int it = 0; it < cfg.rigid_steps; ++it) {
        const EulerTriple g = grad(best);
        const double gn = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        if (gn < 1e-12) break;
        double s = step;
        bool accepted = false;
        for (int h = 0; h <= cfg.max_halvings; ++h) {
            const EulerTriple trial{best[0] - s * g[0], best[1] - s * g[1], best[2] - s * g[2]};
            const double v = eval(trial);
            if (std::isfinite(v) && v < best_val) {
                best = trial;
                best_val = v;
                step = std::min(s * 2.0, cfg.rigid_lr * 8.0);
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if (!accepted) break;
    }
    // Damped Newton polish; the Hessian comes from central differences of
    // the analytic gradient.
    for (int it = 0; it < 8; ++it) {
        const EulerTriple g = grad(best);
        const double h = 1e-5;
        Mat3 hess;
        for (int k = 0; k < 3; ++k) {
            EulerTriple ap = best, am = best;
            ap[k] += h;
            am[k] -= h;
            const EulerTriple gp = grad(ap), gm = grad(am);
            for (int j = 0; j < 3; ++j) hess.m[j][k] = (gp[j] - gm[j]) / (2.0 * h);
        }
        Vec3 d;
        try {
            detail::solve3(hess, Vec3{g[0], g[1], g[2]}, d);
        } catch (const DivergenceError&) {
            break;
        }
        double damp = 1.0;
        bool accepted = false;
        for (int t = 0; t < 12; ++t) {
            const EulerTriple trial{best[0] - damp * d.x, best[1] - damp * d.y,
                                    best[2] - damp * d.z};
            const double v = eval(trial);
            if (std::isfinite(v) && v < best_val) {
                best = trial;
                best_val = v;
                accepted = true;
                break;
            }
            damp *= 0.5;
        }
        if (!accepted) break;
    }
    if (!std::isfinite(best_val)) throw DivergenceError("rigid registration diverged");

    RigidResult out;
    out.angles = best;
    out.sim_before = sim_before;
    out.sim_after = best_val;
    EulerField fld;
    fld.angles.push_back(best);
    out.moved = warp(moving_mesh, fld);
    return out;
}

/// Rigid then coarse-to-fine non-rigid registration. The accumulated
/// deformation is carried as a per-vertex Euler field, upsampled between
/// levels; each level optimizes (or predicts) an increment on top of it.
inline RegistrationResult nonrigid_register(const Subject& moving, const Subject& fixed,
                                            const RegistrationConfig& cfg,
                                            const IcoHierarchy& hier) {
    cfg.validate(hier);
    const auto t0 = std::chrono::steady_clock::now();
    if (moving.level > hier.max_level() || fixed.level > hier.max_level())
        throw InvalidInput("nonrigid_register: subject level exceeds the hierarchy");

    FeatureMap mfeat = moving.features;
    if (!mfeat.normalized) mfeat.zscore();
    FeatureMap ffeat = fixed.features;
    if (!ffeat.normalized) ffeat.zscore();
    const FaceLocator mloc(hier.at(moving.level).mesh, cfg.kappa);
    const FaceLocator floc(hier.at(fixed.level).mesh, cfg.kappa);

    RegistrationResult res;
    res.levels = cfg.levels;

    // Rigid stage.
    const int rl = cfg.rigid_level >= 0 ? cfg.rigid_level : cfg.levels.front();
    EulerTriple rigid{0.0, 0.0, 0.0};
    if (!cfg.skip_rigid) {
        const auto tr = std::chrono::steady_clock::now();
        const SurfaceMesh& rgrid = hier.at(rl).mesh;
        const FeatureMap m_r = detail::resample_zscore(mloc, mfeat, rgrid);
        const FeatureMap f_r = detail::resample_zscore(floc, ffeat, rgrid);
        const RigidResult rr = rigid_register(rgrid, m_r, rgrid, f_r, cfg, &hier);
        rigid = rr.angles;
        res.rigid_seconds = detail::seconds_since(tr);
    }
    res.rigid_angles = rigid;

    const bool with_parc = moving.has_parcellation && fixed.has_parcellation;
    EulerField acc;
    acc.angles.assign(hier.at(cfg.levels.front()).mesh.vertex_count(), rigid);

    int prev_level = cfg.levels.front();
    FeatureMap m_finest;
    for (std::size_t li = 0; li < cfg.levels.size(); ++li) {
        const int level = cfg.levels[li];
        for (int l = prev_level; l < level; ++l)
            acc = upsample_euler(acc, hier.at(l), hier.at(l + 1));
        prev_level = level;

        const SurfaceMesh& grid = hier.at(level).mesh;
        const FeatureMap m_l = detail::resample_zscore(mloc, mfeat, grid);
        const FeatureMap f_l = detail::resample_zscore(floc, ffeat, grid);
        if (li + 1 == cfg.levels.size()) m_finest = m_l;
        const FaceLocator grid_loc(grid, cfg.kappa);

        std::optional<ParcellationMap> mp, fp;
        if (with_parc && cfg.weights.at(level).parc > 0.0) {
            mp = detail::resample_parcellation(mloc, moving.parcellation, grid);
            fp = detail::resample_parcellation(floc, fixed.parcellation, grid);
        }
        // The pristine grid is both the domain of the accumulated field and
        // the distortion reference, so the regularizers always charge the
        // total deformation rather than per-level increments.
        const NonrigidObjective obj(grid, m_l, grid_loc, f_l, cfg.weights.at(level),
                                    mp ? &*mp : nullptr, fp ? &*fp : nullptr, &grid);

        LevelTrace trace;
        if (cfg.mode == Mode::Direct) {
            auto [d, t] = detail::optimize_level(obj, acc, cfg.direct_steps[li],
                                                 cfg.direct_lr[li], cfg.line_search,
                                                 cfg.max_halvings, cfg.grad_smooth_passes);
            acc = std::move(d);
            trace = std::move(t);
        } else {
            const auto tl = std::chrono::steady_clock::now();
            const SurfaceMesh state = warp(grid, euler_to_rotation(acc));
            const int pe_ch = 2 * (2 * cfg.pe_frequencies + 1);
            const auto x = assemble_input(
                positional_features(state.vertices, cfg.pe_frequencies), pe_ch, m_l,
                positional_features(grid.vertices, cfg.pe_frequencies), f_l);
            EulerField delta = sgat_forward((*cfg.models)[li], hier, x);
            delta.validate();
            trace.entry = obj.evaluate(acc);
            acc = compose_euler(delta, acc);
            trace.exit = obj.evaluate(acc);
            trace.step_totals = {trace.entry.total, trace.exit.total};
            trace.seconds = detail::seconds_since(tl);
            if (!std::isfinite(trace.exit.total)) throw DivergenceError("non-finite learned loss");
        }
        trace.level = level;
        res.trace.push_back(std::move(trace));
        res.level_fields.push_back(acc);
    }

    // Finalize at the finest level regardless of where the loop stopped.
    for (int l = prev_level; l < cfg.levels.back(); ++l)
        acc = upsample_euler(acc, hier.at(l), hier.at(l + 1));
    const SurfaceMesh& finest = hier.at(cfg.levels.back()).mesh;
    if (m_finest.values.empty()) m_finest = detail::resample_zscore(mloc, mfeat, finest);
    res.total_field = acc;
    res.moved = warp(finest, euler_to_rotation(acc));
    res.moved_features = m_finest;
    res.moved_features.mesh_key = res.moved.key();
    res.distortion = distortion_report(finest, res.moved);
    res.fold_count = res.distortion.fold_count;
    res.success = res.fold_count == 0;
    res.total_seconds = detail::seconds_since(t0);
    return res;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 200;
    double learning_rate = 3e-4;
    double weight_decay = 0.01;
    double aug_max_rotation = 0.01;  // radians, strict upper bound
    int aug_per_sample = 3;          // augmented variants added per pair
    bool randomized_targets = true;
    bool rigid_prealigned = true;    // corpus spheres share the canonical frame
    bool use_parcellation = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw InvalidInput("TrainConfig: epochs must be >= 1");
        if (aug_max_rotation <= 0.0) throw InvalidInput("TrainConfig: max rotation must be > 0");
        if (aug_per_sample < 0) throw InvalidInput("TrainConfig: bad augmentation count");
    }
};

/// Decoupled-weight-decay adaptive-moment optimizer.
class AdamW {
public:
    AdamW(std::size_t n, double lr, double weight_decay)
        : lr_(lr), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grads) {
        ++t_;
        const double b1c = 1.0 - std::pow(beta1_, t_);
        const double b2c = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
            const double mhat = m_[i] / b1c;
            const double vhat = v_[i] / b2c;
            params[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * params[i]);
        }
    }

private:
    double lr_, wd_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    std::vector<double> m_, v_;
};

struct TrainResult {
    std::vector<ModelParams> models;
    std::vector<LossBreakdown> history;              // one entry per optimizer step
    std::vector<std::vector<double>> epoch_mean_sim; // [level_index][epoch]
};

/// Trains one per-vertex network per level, coarse to fine, with randomized
/// registration targets and small-rotation augmentation. Lower levels are
/// frozen while a level trains.
inline TrainResult train(const Corpus& corpus, std::vector<ModelParams> models,
                         const TrainConfig& tc, const RegistrationConfig& rc,
                         const IcoHierarchy& hier) {
    tc.validate();
    rc.weights.validate();
    const int ns = static_cast<int>(corpus.subjects.size());
    if (ns < 2) throw InvalidInput("train: corpus needs at least 2 subjects");
    if (models.size() != rc.levels.size())
        throw InvalidInput("train: need one model per level");
    for (std::size_t i = 0; i < models.size(); ++i)
        if (models[i].config.level != rc.levels[i] ||
            models[i].config.output_mode != OutputMode::PerVertex)
            throw InvalidInput("train: model does not match its level");

    const int nl = static_cast<int>(rc.levels.size());
    const int pe_ch = 2 * (2 * rc.pe_frequencies + 1);

    // Per-level grids, locators, fixed positional blocks and per-subject
    // resampled features (and optional parcellations).
    std::vector<const SurfaceMesh*> grids(nl);
    std::vector<FaceLocator> locators;
    std::vector<std::vector<double>> pe_fixed(nl);
    std::vector<std::vector<FeatureMap>> feats(nl);
    std::vector<std::vector<ParcellationMap>> parcs(nl);
    {
        const FaceLocator native(hier.at(corpus.level).mesh, rc.kappa);
        for (int li = 0; li < nl; ++li) {
            grids[li] = &hier.at(rc.levels[li]).mesh;
            locators.emplace_back(*grids[li], rc.kappa);
            pe_fixed[li] = positional_features(grids[li]->vertices, rc.pe_frequencies);
            feats[li].reserve(ns);
            for (int s = 0; s < ns; ++s) {
                FeatureMap f = corpus.subjects[s].features;
                if (!f.normalized) f.zscore();
                feats[li].push_back(detail::resample_zscore(native, f, *grids[li]));
                if (tc.use_parcellation && corpus.subjects[s].has_parcellation)
                    parcs[li].push_back(detail::resample_parcellation(
                        native, corpus.subjects[s].parcellation, *grids[li]));
            }
        }
    }
    const bool with_parc = tc.use_parcellation && static_cast<int>(parcs[0].size()) == ns;

    Rng rng(tc.seed);
    TrainResult out;
    out.epoch_mean_sim.assign(nl, {});

    // Applies the frozen models below `upto` to produce the accumulated
    // field at level rc.levels[upto] for the pair (s, t).
    auto lower_state = [&](int upto, int s, int t) {
        EulerField acc = EulerField::zeros(grids[0]->vertex_count());
        for (int lj = 0; lj < upto; ++lj) {
            const SurfaceMesh base = warp(*grids[lj], euler_to_rotation(acc));
            const auto x = assemble_input(positional_features(base.vertices, rc.pe_frequencies),
                                          pe_ch, feats[lj][s], pe_fixed[lj], feats[lj][t]);
            EulerField delta = sgat_forward(models[lj], hier, x);
            acc = compose_euler(delta, acc);
            for (int l = rc.levels[lj]; l < rc.levels[lj + 1]; ++l)
                acc = upsample_euler(acc, hier.at(l), hier.at(l + 1));
        }
        return acc;
    };

    for (int li = 0; li < nl; ++li) {
        AdamW opt(models[li].values.size(), tc.learning_rate, tc.weight_decay);
        for (int epoch = 0; epoch < tc.epochs; ++epoch) {
            std::vector<int> order(ns);
            for (int i = 0; i < ns; ++i) order[i] = i;
            for (int i = ns - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

            double sim_sum = 0.0;
            int sim_count = 0;
            for (int s : order) {
                int t;
                if (tc.randomized_targets) {
                    const int r = rng.below(ns - 1);
                    t = r >= s ? r + 1 : r;
                } else {
                    if (s == 0) continue;
                    t = 0;
                }
                EulerField acc = lower_state(li, s, t);
                for (int variant = 0; variant <= tc.aug_per_sample; ++variant) {
                    EulerField acc_v = acc;
                    if (variant > 0) {
                        const EulerField aug = EulerField::global(
                            rng.uniform(-tc.aug_max_rotation, tc.aug_max_rotation),
                            rng.uniform(-tc.aug_max_rotation, tc.aug_max_rotation),
                            rng.uniform(-tc.aug_max_rotation, tc.aug_max_rotation));
                        acc_v = compose_euler(aug, acc);
                    }
                    const SurfaceMesh base = warp(*grids[li], euler_to_rotation(acc_v));
                    const NonrigidObjective obj(base, feats[li][s], locators[li], feats[li][t],
                                                rc.weights.at(rc.levels[li]),
                                                with_parc ? &parcs[li][s] : nullptr,
                                                with_parc ? &parcs[li][t] : nullptr, grids[li]);
                    const auto x = assemble_input(
                        positional_features(base.vertices, rc.pe_frequencies), pe_ch,
                        feats[li][s], pe_fixed[li], feats[li][t]);
                    SgatWorkspace ws;
                    const EulerField delta = sgat_forward(models[li], hier, x, &ws);
                    const auto p = obj.moved_positions(delta);
                    const LossGradient lg = obj.gradient(delta, obj.locate_faces(p));
                    if (!std::isfinite(lg.breakdown.total))
                        throw DivergenceError("train: non-finite loss");
                    const std::vector<double> dparams = sgat_backward(models[li], hier, ws,
                                                                      lg.d_angles);
                    opt.step(models[li].values, dparams);
                    out.history.push_back(lg.breakdown);
                    sim_sum += lg.breakdown.sim;
                    ++sim_count;
                }
            }
            out.epoch_mean_sim[li].push_back(sim_count ? sim_sum / sim_count : 0.0);
        }
    }
    out.models = std::move(models);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct PairEvaluation {
    double ncc = 0.0;
    double mae = 0.0;
    std::optional<double> dice;
    double areal = 0.0, shape = 0.0, edge = 0.0;
    int fold_count = 0;
    double sim_final = 0.0;
};

/// Post-hoc accuracy of one registration: the moved feature field is
/// resampled back onto the fixed grid and compared channel-wise.
inline PairEvaluation evaluate_pair(const Subject& moving, const Subject& fixed,
                                    const RegistrationResult& res, const IcoHierarchy& hier,
                                    int kappa = 8) {
    const int level = res.levels.back();
    const SurfaceMesh& grid = hier.at(level).mesh;
    FeatureMap ff = fixed.features;
    if (!ff.normalized) ff.zscore();
    const FaceLocator floc(hier.at(fixed.level).mesh, kappa);
    const FeatureMap f_l = detail::resample_zscore(floc, ff, grid);

    const FaceLocator moved_loc(res.moved, kappa);
    const FeatureMap aligned = resample(moved_loc, res.moved_features, grid);

    PairEvaluation ev;
    std::vector<double> a(aligned.vertex_count()), b(aligned.vertex_count());
    for (int i = 0; i < aligned.vertex_count(); ++i) {
        a[i] = aligned.at(i, 0);
        b[i] = f_l.at(i, 0);
    }
    ev.ncc = ncc(a, b);
    ev.mae = mae(a, b);
    ev.areal = res.distortion.areal_mean;
    ev.shape = res.distortion.shape_mean;
    ev.edge = res.distortion.edge_mean;
    ev.fold_count = res.fold_count;
    ev.sim_final = res.trace.empty() ? 0.0 : res.trace.back().exit.sim;

    if (moving.has_parcellation && fixed.has_parcellation) {
        const FaceLocator mloc(hier.at(moving.level).mesh, kappa);
        ParcellationMap mp = detail::resample_parcellation(mloc, moving.parcellation, grid);
        // The moving parcellation rides on the moved sphere; bring it back
        // onto the grid and harden.
        FeatureMap rows;
        rows.mesh_key = res.moved.key();
        rows.channels.resize(mp.parcel_count, "p");
        rows.values = mp.soft;
        const FeatureMap back = resample(moved_loc, rows, grid);
        ParcellationMap moved_parc;
        moved_parc.parcel_count = mp.parcel_count;
        moved_parc.soft = back.values;
        const ParcellationMap fp = detail::resample_parcellation(floc, fixed.parcellation, grid);
        ev.dice = dice_hard(moved_parc.to_hard(), fp.to_hard()).mean;
    }
    return ev;
}

struct Aggregate {
    double mean = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0;
};

inline Aggregate aggregate_values(const std::vector<double>& xs) {
    Aggregate a;
    const double n = static_cast<double>(xs.size());
    if (xs.empty()) return a;
    for (double x : xs) a.mean += x;
    a.mean /= n;
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - a.mean) * (x - a.mean);
        a.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    a.ci_lo = a.mean - 1.96 * a.se;
    a.ci_hi = a.mean + 1.96 * a.se;
    return a;
}

/// Mean and 95% confidence interval per metric across pairs.
inline std::map<std::string, Aggregate> evaluate(const std::vector<PairEvaluation>& pairs) {
    std::map<std::string, std::vector<double>> cols;
    for (const PairEvaluation& p : pairs) {
        cols["ncc"].push_back(p.ncc);
        cols["mae"].push_back(p.mae);
        if (p.dice) cols["dice"].push_back(*p.dice);
        cols["areal"].push_back(p.areal);
        cols["shape"].push_back(p.shape);
        cols["edge"].push_back(p.edge);
        cols["fold_count"].push_back(p.fold_count);
        cols["sim_final"].push_back(p.sim_final);
    }
    std::map<std::string, Aggregate> out;
    for (auto& [k, v] : cols) out[k] = aggregate_values(v);
    return out;
}

}  // namespace sugar
