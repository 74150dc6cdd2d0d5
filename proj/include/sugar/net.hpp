#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/mesh.hpp"
#include "sugar/rng.hpp"

namespace sugar {

/// CSR neighborhoods N_i U {i}, neighbor indices ascending.
struct Adjacency {
    std::vector<int> offsets;    // size N+1
    std::vector<int> neighbors;  // self-loop included

    int vertex_count() const { return static_cast<int>(offsets.size()) - 1; }
    int edge_count() const { return static_cast<int>(neighbors.size()); }

    static Adjacency from_mesh(const SurfaceMesh& mesh) {
        Adjacency adj;
        const int n = mesh.vertex_count();
        adj.offsets.resize(n + 1, 0);
        for (int i = 0; i < n; ++i) adj.offsets[i + 1] = adj.offsets[i] + 1 + static_cast<int>(mesh.one_ring(i).size());
        adj.neighbors.resize(adj.offsets[n]);
        for (int i = 0; i < n; ++i) {
            int* dst = adj.neighbors.data() + adj.offsets[i];
            std::vector<int> nb = mesh.one_ring(i);
            nb.push_back(i);
            std::sort(nb.begin(), nb.end());
            std::copy(nb.begin(), nb.end(), dst);
        }
        return adj;
    }

    /// Builds from bare neighbor lists (self-loops added, sorted).
    static Adjacency from_lists(const std::vector<std::vector<int>>& lists) {
        Adjacency adj;
        const int n = static_cast<int>(lists.size());
        adj.offsets.resize(n + 1, 0);
        for (int i = 0; i < n; ++i) adj.offsets[i + 1] = adj.offsets[i] + 1 + static_cast<int>(lists[i].size());
        adj.neighbors.resize(adj.offsets[n]);
        for (int i = 0; i < n; ++i) {
            std::vector<int> nb = lists[i];
            nb.push_back(i);
            std::sort(nb.begin(), nb.end());
            std::copy(nb.begin(), nb.end(), adj.neighbors.data() + adj.offsets[i]);
        }
        return adj;
    }
};

/// Icosphere chain 0..max_level with per-level neighborhoods; built once and
/// shared by pipelines, networks and tests.
struct IcoHierarchy {
    std::vector<IcoSphere> spheres;
    std::vector<Adjacency> adjacency;

    static IcoHierarchy build(int max_level) {
        IcoHierarchy h;
        for (int l = 0; l <= max_level; ++l) {
            h.spheres.push_back(build_icosphere(l));
            h.adjacency.push_back(Adjacency::from_mesh(h.spheres.back().mesh));
        }
        return h;
    }

    int max_level() const { return static_cast<int>(spheres.size()) - 1; }
    const IcoSphere& at(int level) const { return spheres.at(level); }
    const Adjacency& adj(int level) const { return adjacency.at(level); }
};

enum class HeadCombine { Concat, Average };
enum class OutputMode { PerVertex, Global };

/// U-Net shape: GAT encoder blocks with pooling, a bottleneck block, and a
/// mirrored decoder with skip concatenation, closed by a linear angle head.
struct SgatConfig {
    int level = 4;                            // working icosphere level
    int in_channels = 38;                     // 2 * (features + 2*(2L+1))
    std::vector<int> encoder_widths = {64, 128};
    int heads = 4;
    double leaky_slope = 0.2;
    OutputMode output_mode = OutputMode::PerVertex;

    int depth() const { return static_cast<int>(encoder_widths.size()); }

    void validate() const {
        if (level < 1 || level > 7) throw InvalidInput("SgatConfig: bad level");
        if (in_channels < 1) throw InvalidInput("SgatConfig: bad channel count");
        if (encoder_widths.empty()) throw InvalidInput("SgatConfig: empty encoder");
        if (depth() > level) throw InvalidInput("SgatConfig: depth exceeds the icosphere level");
        if (heads < 1) throw InvalidInput("SgatConfig: bad head count");
        for (int w : encoder_widths)
            if (w < heads || w % heads != 0)
                throw InvalidInput("SgatConfig: widths must be positive multiples of the head count");
    }

    static int input_channels_for(int feature_channels, int pe_frequencies) {
        return 2 * (feature_channels + 2 * (2 * pe_frequencies + 1));
    }
};

namespace detail {

struct GatLayerSpec {
    int level = 0;
    int in_ch = 0;
    int out_ch = 0;           // total across heads (concat)
    int heads = 1;
    std::size_t offset = 0;   // into the flat parameter vector
    int head_out() const { return out_ch / heads; }
    std::size_t head_stride() const {
        return static_cast<std::size_t>(head_out()) * (2 * in_ch) + head_out();
    }
    std::size_t size() const { return head_stride() * heads; }
};

struct SgatLayout {
    std::vector<GatLayerSpec> gat;  // encoder..., bottleneck, decoder...
    std::size_t head_offset = 0;    // linear head W (3 x last width) then b (3)
    int head_in = 0;
    std::size_t total = 0;

    static SgatLayout from_config(const SgatConfig& c) {
        c.validate();
        SgatLayout lay;
        const int d = c.depth();
        const auto& w = c.encoder_widths;
        std::size_t off = 0;
        auto push = [&](int level, int in_ch, int out_ch) {
            GatLayerSpec s;
            s.level = level;
            s.in_ch = in_ch;
            s.out_ch = out_ch;
            s.heads = c.heads;
            s.offset = off;
            off += s.size();
            lay.gat.push_back(s);
        };
        for (int k = 0; k < d; ++k) push(c.level - k, k == 0 ? c.in_channels : w[k - 1], w[k]);
        push(c.level - d, w[d - 1], w[d - 1]);  // bottleneck
        for (int k = d - 1; k >= 0; --k) push(c.level - k, 2 * w[k], k == 0 ? w[0] : w[k - 1]);
        lay.head_offset = off;
        lay.head_in = w[0];
        lay.total = off + 3 * static_cast<std::size_t>(w[0]) + 3;
        return lay;
    }
};

}  // namespace detail

/// All learnable parameters as one flat vector; layer views are computed
/// from the config. The layout, and therefore serialization, is fixed by
/// declaration order: per GAT layer, per head, W (head_out x 2*in, row
/// major) then a (head_out); finally the angle head W (3 x width) and bias.
struct ModelParams {
    SgatConfig config;
    std::uint64_t seed = 0;
    std::vector<double> values;

    static ModelParams init(const SgatConfig& config, std::uint64_t seed) {
        const auto layout = detail::SgatLayout::from_config(config);
        ModelParams m;
        m.config = config;
        m.seed = seed;
        m.values.assign(layout.total, 0.0);
        Rng rng(seed);
        for (const auto& spec : layout.gat) {
            const int ho = spec.head_out();
            const double bound_w = std::sqrt(6.0 / (2.0 * spec.in_ch + ho));
            const double bound_a = std::sqrt(6.0 / (ho + 1.0));
            for (int k = 0; k < spec.heads; ++k) {
                double* w = m.values.data() + spec.offset + k * spec.head_stride();
                for (int j = 0; j < ho * 2 * spec.in_ch; ++j) w[j] = rng.uniform(-bound_w, bound_w);
                double* a = w + ho * 2 * spec.in_ch;
                for (int j = 0; j < ho; ++j) a[j] = rng.uniform(-bound_a, bound_a);
            }
        }
        // Angle head stays zero: training starts from the identity warp.
        return m;
    }

    detail::SgatLayout layout() const { return detail::SgatLayout::from_config(config); }
};

namespace detail {

inline double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double leaky_grad(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

/// One multi-head GAT layer. X is row-major n x in_ch; the result is
/// row-major n x out_ch (heads concatenated) or n x head_out (averaged).
/// When `cache` is non-null the per-head transforms and attention rows are
/// recorded for the backward pass.
struct GatCache {
    std::vector<std::vector<double>> y, z;      // per head, n x head_out
    std::vector<std::vector<double>> alpha;     // per head, CSR edge order
};

inline void gat_forward(const GatLayerSpec& spec, const double* params, const Adjacency& adj,
                        const std::vector<double>& x, double slope, HeadCombine combine,
                        std::vector<double>& out, GatCache* cache) {
    const int n = adj.vertex_count();
    const int fin = spec.in_ch, ho = spec.head_out(), heads = spec.heads;
    if (static_cast<int>(x.size()) != n * fin) throw InvalidInput("gat_forward: feature shape mismatch");
    const int out_ch = combine == HeadCombine::Concat ? spec.out_ch : ho;
    out.assign(static_cast<std::size_t>(n) * out_ch, 0.0);
    if (cache) {
        cache->y.assign(heads, {});
        cache->z.assign(heads, {});
        cache->alpha.assign(heads, {});
    }

    std::vector<double> y(static_cast<std::size_t>(n) * ho), z(static_cast<std::size_t>(n) * ho);
    std::vector<double> alpha(adj.edge_count());
    std::vector<double> scores;
    for (int k = 0; k < heads; ++k) {
        const double* w = params + spec.offset + k * spec.head_stride();
        const double* a = w + static_cast<std::size_t>(ho) * 2 * fin;
        // y_i = W_dst x_i, z_i = W_src x_i (left/right halves of each W row).
        for (int i = 0; i < n; ++i) {
            const double* xi = x.data() + static_cast<std::size_t>(i) * fin;
            for (int o = 0; o < ho; ++o) {
                const double* wr = w + static_cast<std::size_t>(o) * 2 * fin;
                double sy = 0.0, sz = 0.0;
                for (int c = 0; c < fin; ++c) {
                    sy += wr[c] * xi[c];
                    sz += wr[fin + c] * xi[c];
                }
                y[static_cast<std::size_t>(i) * ho + o] = sy;
                z[static_cast<std::size_t>(i) * ho + o] = sz;
            }
        }
        // Attention rows and messages.
        for (int i = 0; i < n; ++i) {
            const int begin = adj.offsets[i], end = adj.offsets[i + 1];
            scores.assign(end - begin, 0.0);
            double mx = -1e300;
            for (int e = begin; e < end; ++e) {
                const int j = adj.neighbors[e];
                const double* yi = y.data() + static_cast<std::size_t>(i) * ho;
                const double* zj = z.data() + static_cast<std::size_t>(j) * ho;
                double s = 0.0;
                for (int o = 0; o < ho; ++o) s += a[o] * leaky(yi[o] + zj[o], slope);
                scores[e - begin] = s;
                mx = std::max(mx, s);
            }
            double denom = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            double* orow = out.data() + static_cast<std::size_t>(i) * out_ch +
                           (combine == HeadCombine::Concat ? static_cast<std::size_t>(k) * ho : 0);
            for (int e = begin; e < end; ++e) {
                const double al = scores[e - begin] / denom;
                alpha[e] = al;
                const double* zj = z.data() + static_cast<std::size_t>(adj.neighbors[e]) * ho;
                const double scale = combine == HeadCombine::Concat ? al : al / heads;
                for (int o = 0; o < ho; ++o) orow[o] += scale * zj[o];
            }
        }
        if (cache) {
            cache->y[k] = y;
            cache->z[k] = z;
            cache->alpha[k] = alpha;
        }
    }
}

/// Backward through one layer. d_out is the gradient w.r.t. the layer's
/// pre-activation output; accumulates parameter gradients and returns the
/// gradient w.r.t. the layer input.
inline void gat_backward(const GatLayerSpec& spec, const double* params, const Adjacency& adj,
                         const std::vector<double>& x, const GatCache& cache, double slope,
                         HeadCombine combine, const std::vector<double>& d_out, double* d_params,
                         std::vector<double>& d_x) {
    const int n = adj.vertex_count();
    const int fin = spec.in_ch, ho = spec.head_out(), heads = spec.heads;
    const int out_ch = combine == HeadCombine::Concat ? spec.out_ch : ho;
    d_x.assign(static_cast<std::size_t>(n) * fin, 0.0);

    std::vector<double> dy(static_cast<std::size_t>(n) * ho), dz(static_cast<std::size_t>(n) * ho);
    std::vector<double> dalpha;
    for (int k = 0; k < heads; ++k) {
        const double* w = params + spec.offset + k * spec.head_stride();
        const double* a = w + static_cast<std::size_t>(ho) * 2 * fin;
        double* dw = d_params + spec.offset + k * spec.head_stride();
        double* da = dw + static_cast<std::size_t>(ho) * 2 * fin;
        const auto& y = cache.y[k];
        const auto& z = cache.z[k];
        const auto& alpha = cache.alpha[k];
        std::fill(dy.begin(), dy.end(), 0.0);
        std::fill(dz.begin(), dz.end(), 0.0);

        for (int i = 0; i < n; ++i) {
            const int begin = adj.offsets[i], end = adj.offsets[i + 1];
            const double* g = d_out.data() + static_cast<std::size_t>(i) * out_ch +
                              (combine == HeadCombine::Concat ? static_cast<std::size_t>(k) * ho : 0);
            const double gscale = combine == HeadCombine::Concat ? 1.0 : 1.0 / heads;
            // Through the messages: out_i = sum_j alpha_ij z_j.
            dalpha.assign(end - begin, 0.0);
            double dot_i = 0.0;
            for (int e = begin; e < end; ++e) {
                const int j = adj.neighbors[e];
                const double* zj = z.data() + static_cast<std::size_t>(j) * ho;
                double* dzj = dz.data() + static_cast<std::size_t>(j) * ho;
                double gz = 0.0;
                for (int o = 0; o < ho; ++o) {
                    gz += g[o] * zj[o];
                    dzj[o] += gscale * alpha[e] * g[o];
                }
                dalpha[e - begin] = gscale * gz;
                dot_i += alpha[e] * dalpha[e - begin];
            }
            // Softmax, then the score path s_ij = sum_o a_o leaky(y_i + z_j).
            const double* yi = y.data() + static_cast<std::size_t>(i) * ho;
            double* dyi = dy.data() + static_cast<std::size_t>(i) * ho;
            for (int e = begin; e < end; ++e) {
                const double ds = alpha[e] * (dalpha[e - begin] - dot_i);
                if (ds == 0.0) continue;
                const int j = adj.neighbors[e];
                const double* zj = z.data() + static_cast<std::size_t>(j) * ho;
                double* dzj = dz.data() + static_cast<std::size_t>(j) * ho;
                for (int o = 0; o < ho; ++o) {
                    const double u = yi[o] + zj[o];
                    da[o] += ds * leaky(u, slope);
                    const double du = ds * a[o] * leaky_grad(u, slope);
                    dyi[o] += du;
                    dzj[o] += du;
                }
            }
        }
        // Through the linear transforms y = W_dst x, z = W_src x.
        for (int i = 0; i < n; ++i) {
            const double* xi = x.data() + static_cast<std::size_t>(i) * fin;
            double* dxi = d_x.data() + static_cast<std::size_t>(i) * fin;
            const double* dyi = dy.data() + static_cast<std::size_t>(i) * ho;
            const double* dzi = dz.data() + static_cast<std::size_t>(i) * ho;
            for (int o = 0; o < ho; ++o) {
                const double* wr = w + static_cast<std::size_t>(o) * 2 * fin;
                double* dwr = dw + static_cast<std::size_t>(o) * 2 * fin;
                const double gy = dyi[o], gz = dzi[o];
                if (gy != 0.0) {
                    for (int c = 0; c < fin; ++c) {
                        dwr[c] += gy * xi[c];
                        dxi[c] += gy * wr[c];
                    }
                }
                if (gz != 0.0) {
                    for (int c = 0; c < fin; ++c) {
                        dwr[fin + c] += gz * xi[c];
                        dxi[c] += gz * wr[fin + c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Per-edge attention rows (CSR order) for a single head; exposed for
/// direct verification of the attention formulas.
inline std::vector<double> attention_coefficients(std::span<const double> w,
                                                  std::span<const double> a, int head_out,
                                                  int in_ch, const Adjacency& adj,
                                                  const std::vector<double>& x,
                                                  double slope = 0.2) {
    if (static_cast<int>(w.size()) != head_out * 2 * in_ch || static_cast<int>(a.size()) != head_out)
        throw InvalidInput("attention_coefficients: parameter shape mismatch");
    detail::GatLayerSpec spec;
    spec.in_ch = in_ch;
    spec.out_ch = head_out;
    spec.heads = 1;
    spec.offset = 0;
    std::vector<double> params(w.begin(), w.end());
    params.insert(params.end(), a.begin(), a.end());
    std::vector<double> out;
    detail::GatCache cache;
    detail::gat_forward(spec, params.data(), adj, x, slope, HeadCombine::Concat, out, &cache);
    return cache.alpha[0];
}

/// Multi-head layer forward over explicit parameters (heads stacked as in
/// ModelParams); hidden layers concatenate heads, an output layer averages.
inline std::vector<double> gat_layer_forward(std::span<const double> params, int heads,
                                             int head_out, int in_ch, const Adjacency& adj,
                                             const std::vector<double>& x, double slope = 0.2,
                                             HeadCombine combine = HeadCombine::Concat) {
    detail::GatLayerSpec spec;
    spec.in_ch = in_ch;
    spec.out_ch = head_out * heads;
    spec.heads = heads;
    spec.offset = 0;
    if (params.size() != spec.size()) throw InvalidInput("gat_layer_forward: parameter size mismatch");
    std::vector<double> out;
    detail::gat_forward(spec, params.data(), adj, x, slope, combine, out, nullptr);
    return out;
}

/// Scatter-mean pooling onto the nested coarser sphere: each coarse vertex
/// averages itself and its fine-level one-ring.
inline std::vector<double> pool(const std::vector<double>& x, int channels,
                                const IcoHierarchy& hier, int fine_level) {
    const SurfaceMesh& fine = hier.at(fine_level).mesh;
    const int nc = IcoSphere::ico_vertex_count(fine_level - 1);
    if (static_cast<int>(x.size()) != fine.vertex_count() * channels)
        throw InvalidInput("pool: feature shape mismatch");
    std::vector<double> out(static_cast<std::size_t>(nc) * channels, 0.0);
    for (int v = 0; v < nc; ++v) {
        const auto& ring = fine.one_ring(v);
        const double inv = 1.0 / (1.0 + static_cast<double>(ring.size()));
        double* o = out.data() + static_cast<std::size_t>(v) * channels;
        const double* self = x.data() + static_cast<std::size_t>(v) * channels;
        for (int c = 0; c < channels; ++c) o[c] = self[c];
        for (int j : ring) {
            const double* xj = x.data() + static_cast<std::size_t>(j) * channels;
            for (int c = 0; c < channels; ++c) o[c] += xj[c];
        }
        for (int c = 0; c < channels; ++c) o[c] *= inv;
    }
    return out;
}

inline void pool_backward(const std::vector<double>& d_out, int channels, const IcoHierarchy& hier,
                          int fine_level, std::vector<double>& d_x) {
    const SurfaceMesh& fine = hier.at(fine_level).mesh;
    const int nc = IcoSphere::ico_vertex_count(fine_level - 1);
    d_x.assign(static_cast<std::size_t>(fine.vertex_count()) * channels, 0.0);
    for (int v = 0; v < nc; ++v) {
        const auto& ring = fine.one_ring(v);
        const double inv = 1.0 / (1.0 + static_cast<double>(ring.size()));
        const double* g = d_out.data() + static_cast<std::size_t>(v) * channels;
        double* self = d_x.data() + static_cast<std::size_t>(v) * channels;
        for (int c = 0; c < channels; ++c) self[c] += g[c] * inv;
        for (int j : ring) {
            double* xj = d_x.data() + static_cast<std::size_t>(j) * channels;
            for (int c = 0; c < channels; ++c) xj[c] += g[c] * inv;
        }
    }
}

/// Unpooling onto the nested finer sphere: coarse vertices copy through,
/// edge-midpoint vertices average their two parents.
inline std::vector<double> unpool(const std::vector<double>& x, int channels,
                                  const IcoHierarchy& hier, int coarse_level) {
    const IcoSphere& fine = hier.at(coarse_level + 1);
    const int nc = IcoSphere::ico_vertex_count(coarse_level);
    const int nf = fine.mesh.vertex_count();
    if (static_cast<int>(x.size()) != nc * channels) throw InvalidInput("unpool: feature shape mismatch");
    std::vector<double> out(static_cast<std::size_t>(nf) * channels);
    std::copy(x.begin(), x.end(), out.begin());
    for (int v = nc; v < nf; ++v) {
        const auto [p, q] = fine.parent_vertex_pairs[v - nc];
        const double* xp = x.data() + static_cast<std::size_t>(p) * channels;
        const double* xq = x.data() + static_cast<std::size_t>(q) * channels;
        double* o = out.data() + static_cast<std::size_t>(v) * channels;
        for (int c = 0; c < channels; ++c) o[c] = 0.5 * (xp[c] + xq[c]);
    }
    return out;
}

inline void unpool_backward(const std::vector<double>& d_out, int channels,
                            const IcoHierarchy& hier, int coarse_level, std::vector<double>& d_x) {
    const IcoSphere& fine = hier.at(coarse_level + 1);
    const int nc = IcoSphere::ico_vertex_count(coarse_level);
    const int nf = fine.mesh.vertex_count();
    d_x.assign(static_cast<std::size_t>(nc) * channels, 0.0);
    for (int v = 0; v < nc; ++v) {
        const double* g = d_out.data() + static_cast<std::size_t>(v) * channels;
        double* o = d_x.data() + static_cast<std::size_t>(v) * channels;
        for (int c = 0; c < channels; ++c) o[c] += g[c];
    }
    for (int v = nc; v < nf; ++v) {
        const auto [p, q] = fine.parent_vertex_pairs[v - nc];
        const double* g = d_out.data() + static_cast<std::size_t>(v) * channels;
        double* xp = d_x.data() + static_cast<std::size_t>(p) * channels;
        double* xq = d_x.data() + static_cast<std::size_t>(q) * channels;
        for (int c = 0; c < channels; ++c) {
            xp[c] += 0.5 * g[c];
            xq[c] += 0.5 * g[c];
        }
    }
}

/// Everything the backward pass needs from a forward run.
struct SgatWorkspace {
    std::vector<std::vector<double>> layer_inputs;   // per GAT layer
    std::vector<std::vector<double>> layer_preact;   // pre-activation outputs
    std::vector<detail::GatCache> layer_caches;
    std::vector<std::vector<double>> enc_post;       // post-activation encoder outputs (skips)
    std::vector<double> head_input;                  // final decoder post-activation
    std::vector<EulerTriple> vertex_angles;          // before global averaging
};

/// Encoder-pool / unpool-skip-decoder forward, ending in the linear angle
/// head. Input is row-major N x in_channels at the working level.
inline EulerField sgat_forward(const ModelParams& model, const IcoHierarchy& hier,
                               const std::vector<double>& input, SgatWorkspace* ws = nullptr) {
    const SgatConfig& c = model.config;
    const auto layout = model.layout();
    const int d = c.depth();
    if (hier.max_level() < c.level) throw InvalidInput("sgat_forward: hierarchy too shallow");
    if (static_cast<int>(input.size()) !=
        IcoSphere::ico_vertex_count(c.level) * c.in_channels)
        throw InvalidInput("sgat_forward: input shape mismatch");

    SgatWorkspace local;
    SgatWorkspace& w = ws ? *ws : local;
    const int nlayers = static_cast<int>(layout.gat.size());
    w.layer_inputs.assign(nlayers, {});
    w.layer_preact.assign(nlayers, {});
    w.layer_caches.assign(nlayers, {});
    w.enc_post.assign(d, {});

    auto run_layer = [&](int idx, std::vector<double>&& x) {
        const auto& spec = layout.gat[idx];
        w.layer_inputs[idx] = std::move(x);
        detail::gat_forward(spec, model.values.data(), hier.adj(spec.level), w.layer_inputs[idx],
                            c.leaky_slope, HeadCombine::Concat, w.layer_preact[idx],
                            ws ? &w.layer_caches[idx] : nullptr);
        std::vector<double> post = w.layer_preact[idx];
        for (double& v : post) v = detail::leaky(v, c.leaky_slope);
        return post;
    };

    std::vector<double> x = input;
    for (int k = 0; k < d; ++k) {
        std::vector<double> post = run_layer(k, std::move(x));
        w.enc_post[k] = post;
        x = pool(post, layout.gat[k].out_ch, hier, c.level - k);
    }
    x = run_layer(d, std::move(x));  // bottleneck
    for (int k = d - 1; k >= 0; --k) {
        const int idx = d + 1 + (d - 1 - k);
        const int ch = c.encoder_widths[k];
        std::vector<double> up = unpool(x, ch, hier, c.level - k - 1);
        const int n = IcoSphere::ico_vertex_count(c.level - k);
        std::vector<double> cat(static_cast<std::size_t>(n) * 2 * ch);
        for (int i = 0; i < n; ++i) {
            std::copy_n(up.data() + static_cast<std::size_t>(i) * ch, ch,
                        cat.data() + static_cast<std::size_t>(i) * 2 * ch);
            std::copy_n(w.enc_post[k].data() + static_cast<std::size_t>(i) * ch, ch,
                        cat.data() + static_cast<std::size_t>(i) * 2 * ch + ch);
        }
        x = run_layer(idx, std::move(cat));
    }
    w.head_input = x;

    const int n = IcoSphere::ico_vertex_count(c.level);
    const double* hw = model.values.data() + layout.head_offset;
    const double* hb = hw + 3 * layout.head_in;
    w.vertex_angles.resize(n);
    for (int i = 0; i < n; ++i) {
        const double* xi = x.data() + static_cast<std::size_t>(i) * layout.head_in;
        for (int o = 0; o < 3; ++o) {
            double s = hb[o];
            const double* wr = hw + static_cast<std::size_t>(o) * layout.head_in;
            for (int cch = 0; cch < layout.head_in; ++cch) s += wr[cch] * xi[cch];
            w.vertex_angles[i][o] = s;
        }
    }

    EulerField out;
    if (c.output_mode == OutputMode::Global) {
        EulerTriple mean{0.0, 0.0, 0.0};
        for (const auto& t : w.vertex_angles)
            for (int o = 0; o < 3; ++o) mean[o] += t[o];
        for (int o = 0; o < 3; ++o) mean[o] /= n;
        out.angles.push_back(mean);
    } else {
        out.angles = w.vertex_angles;
    }
    return out;
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient w.r.t. the output angles. Requires the workspace of the
/// matching forward call.
inline std::vector<double> sgat_backward(const ModelParams& model, const IcoHierarchy& hier,
                                         const SgatWorkspace& w,
                                         const std::vector<EulerTriple>& d_angles) {
    const SgatConfig& c = model.config;
    const auto layout = model.layout();
    const int d = c.depth();
    const int n = IcoSphere::ico_vertex_count(c.level);
    std::vector<double> d_params(layout.total, 0.0);

    // Broadcast the global-average gradient when needed.
    std::vector<EulerTriple> dv;
    if (c.output_mode == OutputMode::Global) {
        if (d_angles.size() != 1) throw InvalidInput("sgat_backward: expected one angle gradient row");
        EulerTriple g = d_angles[0];
        for (int o = 0; o < 3; ++o) g[o] /= n;
        dv.assign(n, g);
    } else {
        if (static_cast<int>(d_angles.size()) != n)
            throw InvalidInput("sgat_backward: angle gradient row count mismatch");
        dv = d_angles;
    }

    // Linear head.
    const double* hw = model.values.data() + layout.head_offset;
    double* dhw = d_params.data() + layout.head_offset;
    double* dhb = dhw + 3 * layout.head_in;
    std::vector<double> dx(static_cast<std::size_t>(n) * layout.head_in, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* xi = w.head_input.data() + static_cast<std::size_t>(i) * layout.head_in;
        double* dxi = dx.data() + static_cast<std::size_t>(i) * layout.head_in;
        for (int o = 0; o < 3; ++o) {
            const double g = dv[i][o];
            if (g == 0.0) continue;
            dhb[o] += g;
            const double* wr = hw + static_cast<std::size_t>(o) * layout.head_in;
            double* dwr = dhw + static_cast<std::size_t>(o) * layout.head_in;
            for (int cch = 0; cch < layout.head_in; ++cch) {
                dwr[cch] += g * xi[cch];
                dxi[cch] += g * wr[cch];
            }
        }
    }

    auto activation_backward = [&](int idx, std::vector<double>& d_post) {
        const auto& pre = w.layer_preact[idx];
        for (std::size_t i = 0; i < d_post.size(); ++i)
            d_post[i] *= detail::leaky_grad(pre[i], c.leaky_slope);
    };

    std::vector<std::vector<double>> d_skip(d);
    std::vector<double> d_in;
    // Decoder layers, finest first (reverse of the forward tail).
    for (int k = 0; k <= d - 1; ++k) {
        const int idx = 2 * d - k;  // dec layer operating at level c.level - k
        const auto& spec = layout.gat[idx];
        activation_backward(idx, dx);
        detail::gat_backward(spec, model.values.data(), hier.adj(spec.level), w.layer_inputs[idx],
                             w.layer_caches[idx], c.leaky_slope, HeadCombine::Concat, dx,
                             d_params.data(), d_in);
        const int ch = c.encoder_widths[k];
        const int nl = IcoSphere::ico_vertex_count(c.level - k);
        std::vector<double> d_up(static_cast<std::size_t>(nl) * ch);
        d_skip[k].assign(static_cast<std::size_t>(nl) * ch, 0.0);
        for (int i = 0; i < nl; ++i)
            for (int cc = 0; cc < ch; ++cc) {
                d_up[static_cast<std::size_t>(i) * ch + cc] =
                    d_in[static_cast<std::size_t>(i) * 2 * ch + cc];
                d_skip[k][static_cast<std::size_t>(i) * ch + cc] =
                    d_in[static_cast<std::size_t>(i) * 2 * ch + ch + cc];
            }
        unpool_backward(d_up, ch, hier, c.level - k - 1, dx);
    }
    // Bottleneck.
    activation_backward(d, dx);
    detail::gat_backward(layout.gat[d], model.values.data(), hier.adj(layout.gat[d].level),
                         w.layer_inputs[d], w.layer_caches[d], c.leaky_slope, HeadCombine::Concat,
                         dx, d_params.data(), d_in);
    dx = std::move(d_in);
    // Encoder layers, deepest first.
    for (int k = d - 1; k >= 0; --k) {
        std::vector<double> d_post;
        pool_backward(dx, layout.gat[k].out_ch, hier, c.level - k, d_post);
        for (std::size_t i = 0; i < d_post.size(); ++i) d_post[i] += d_skip[k][i];
        activation_backward(k, d_post);
        detail::gat_backward(layout.gat[k], model.values.data(), hier.adj(layout.gat[k].level),
                             w.layer_inputs[k], w.layer_caches[k], c.leaky_slope,
                             HeadCombine::Concat, d_post, d_params.data(), d_in);
        dx = std::move(d_in);
    }
    return d_params;
}

/// Stacks [pe_moving | moving | pe_fixed | fixed] rows into the network
/// input block.
inline std::vector<double> assemble_input(const std::vector<double>& pe_moving, int pe_ch,
                                          const FeatureMap& moving,
                                          const std::vector<double>& pe_fixed,
                                          const FeatureMap& fixed) {
    const int n = moving.vertex_count();
    const int fc = moving.channel_count();
    if (fixed.vertex_count() != n || fixed.channel_count() != fc)
        throw InvalidInput("assemble_input: feature shape mismatch");
    if (static_cast<int>(pe_moving.size()) != n * pe_ch ||
        static_cast<int>(pe_fixed.size()) != n * pe_ch)
        throw InvalidInput("assemble_input: positional shape mismatch");
    const int c = 2 * (pe_ch + fc);
    std::vector<double> x(static_cast<std::size_t>(n) * c);
    for (int i = 0; i < n; ++i) {
        double* row = x.data() + static_cast<std::size_t>(i) * c;
        std::copy_n(pe_moving.data() + static_cast<std::size_t>(i) * pe_ch, pe_ch, row);
        for (int k = 0; k < fc; ++k) row[pe_ch + k] = moving.at(i, k);
        std::copy_n(pe_fixed.data() + static_cast<std::size_t>(i) * pe_ch, pe_ch, row + pe_ch + fc);
        for (int k = 0; k < fc; ++k) row[2 * pe_ch + fc + k] = fixed.at(i, k);
    }
    return x;
}

}  // namespace sugar
