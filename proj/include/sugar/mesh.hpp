#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"

namespace sugar {

using FaceTri = std::array<int, 3>;

/// Azimuth/polar pair normalized to [0,1] x [0,1].
/// rho = atan2(y,x)/(2*pi) + 1/2, theta = atan2(sqrt(x^2+y^2), z)/pi.
/// Both poles have x = y = 0, where atan2(0,0) = 0 puts rho at 0.5.
inline std::pair<double, double> cart_to_sph(const Vec3& v) {
    const double rho = std::atan2(v.y, v.x) / (2.0 * kPi) + 0.5;
    const double theta = std::atan2(std::sqrt(v.x * v.x + v.y * v.y), v.z) / kPi;
    return {rho, theta};
}

inline Vec3 sph_to_cart(double rho, double theta) {
    const double az = (rho - 0.5) * 2.0 * kPi;
    const double pol = theta * kPi;
    return {std::sin(pol) * std::cos(az), std::sin(pol) * std::sin(az), std::cos(pol)};
}

/// Closed triangulated sphere. Vertices are expected on (or near) the unit
/// sphere; faces wind counter-clockwise seen from outside. Connectivity
/// (one-rings, edges) is built once and shared by deformed copies.
class SurfaceMesh {
public:
    std::vector<Vec3> vertices;
    std::vector<FaceTri> faces;

    SurfaceMesh() = default;

    /// Validating constructor: checks index ranges, face orientation and the
    /// Euler characteristic, then caches one-rings and the edge list.
    static SurfaceMesh build(std::vector<Vec3> vertices, std::vector<FaceTri> faces);

    /// Same connectivity, new vertex positions. Skips validation: deformed
    /// copies may legitimately contain inverted faces.
    SurfaceMesh with_vertices(std::vector<Vec3> new_vertices) const {
        if (new_vertices.size() != vertices.size())
            throw InvalidInput("with_vertices: vertex count mismatch");
        SurfaceMesh m = *this;
        m.vertices = std::move(new_vertices);
        m.key_ = compute_key(m.vertices);
        return m;
    }

    int vertex_count() const { return static_cast<int>(vertices.size()); }
    int face_count() const { return static_cast<int>(faces.size()); }
    int edge_count() const { return static_cast<int>(edges_.size()); }

    /// Cyclically ordered 1-hop neighborhood (counter-clockwise from outside).
    const std::vector<int>& one_ring(int i) const { return one_ring_[i]; }

    /// Deduplicated undirected edges, each stored as (i, j) with i < j.
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }

    /// Face indices incident to each vertex.
    const std::vector<int>& vertex_faces(int i) const { return vertex_faces_[i]; }

    double mean_edge_length() const {
        double s = 0.0;
        for (const auto& [i, j] : edges_) s += norm(vertices[i] - vertices[j]);
        return s / static_cast<double>(edges_.size());
    }

    /// Content hash of the vertex coordinates; identifies the geometry a
    /// FeatureMap or FaceLocator was built against.
    std::uint64_t key() const { return key_; }

    static std::uint64_t compute_key(const std::vector<Vec3>& verts) {
        // FNV-1a over the raw coordinate bytes.
        std::uint64_t h = 1469598103934665603ull;
        for (const Vec3& v : verts) {
            unsigned char buf[sizeof(double) * 3];
            std::memcpy(buf, &v.x, sizeof(double));
            std::memcpy(buf + sizeof(double), &v.y, sizeof(double));
            std::memcpy(buf + 2 * sizeof(double), &v.z, sizeof(double));
            for (unsigned char b : buf) {
                h ^= b;
                h *= 1099511628211ull;
            }
        }
        return h;
    }

private:
    std::vector<std::vector<int>> one_ring_;
    std::vector<std::vector<int>> vertex_faces_;
    std::vector<std::pair<int, int>> edges_;
    std::uint64_t key_ = 0;
};

/// Signed face area projected on the outward radial direction at the face
/// centroid: (e_ij x e_ik) . n / 2. Positive for outward-wound faces.
inline double oriented_area(const SurfaceMesh& mesh, int t) {
    const FaceTri& f = mesh.faces[t];
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    const Vec3 u = cross(b - a, c - a);
    const Vec3 n = normalized((a + b + c) / 3.0);
    return 0.5 * dot(u, n);
}

inline double oriented_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 u = cross(b - a, c - a);
    const Vec3 n = normalized((a + b + c) / 3.0);
    return 0.5 * dot(u, n);
}

inline SurfaceMesh SurfaceMesh::build(std::vector<Vec3> vertices, std::vector<FaceTri> faces) {
    SurfaceMesh m;
    m.vertices = std::move(vertices);
    m.faces = std::move(faces);
    const int nv = m.vertex_count();
    const int nf = m.face_count();
    if (nv < 4 || nf < 4) throw InvalidInput("SurfaceMesh: too few vertices or faces");

    for (int t = 0; t < nf; ++t) {
        const FaceTri& f = m.faces[t];
        for (int k = 0; k < 3; ++k)
            if (f[k] < 0 || f[k] >= nv) throw InvalidInput("SurfaceMesh: face index out of range");
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            throw InvalidInput("SurfaceMesh: degenerate face");
        if (oriented_area(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]) <= 0.0)
            throw InvalidInput("SurfaceMesh: face " + std::to_string(t) + " is not outward-wound");
    }

    // Edges and incident faces.
    std::map<std::pair<int, int>, int> edge_use;
    m.vertex_faces_.assign(nv, {});
    for (int t = 0; t < nf; ++t) {
        const FaceTri& f = m.faces[t];
        for (int k = 0; k < 3; ++k) {
            m.vertex_faces_[f[k]].push_back(t);
            const int i = f[k], j = f[(k + 1) % 3];
            edge_use[{std::min(i, j), std::max(i, j)}]++;
        }
    }
    m.edges_.reserve(edge_use.size());
    for (const auto& [e, uses] : edge_use) {
        if (uses != 2) throw InvalidInput("SurfaceMesh: surface is not closed (boundary edge)");
        m.edges_.push_back(e);
    }
    if (nv - static_cast<int>(m.edges_.size()) + nf != 2)
        throw InvalidInput("SurfaceMesh: Euler characteristic != 2");

    // Cyclic one-rings: around vertex i, face (i,b,c) maps b -> c; following
    // the map walks the ring counter-clockwise as seen from outside.
    m.one_ring_.assign(nv, {});
    for (int i = 0; i < nv; ++i) {
        std::map<int, int> succ;
        for (int t : m.vertex_faces_[i]) {
            const FaceTri& f = m.faces[t];
            int b, c;
            if (f[0] == i) { b = f[1]; c = f[2]; }
            else if (f[1] == i) { b = f[2]; c = f[0]; }
            else { b = f[0]; c = f[1]; }
            succ[b] = c;
        }
        if (succ.empty()) throw InvalidInput("SurfaceMesh: isolated vertex");
        int start = succ.begin()->first;  // smallest neighbor: deterministic ring phase
        std::vector<int>& ring = m.one_ring_[i];
        ring.push_back(start);
        for (int cur = succ[start]; cur != start; cur = succ[cur]) {
            ring.push_back(cur);
            if (ring.size() > succ.size()) throw InvalidInput("SurfaceMesh: non-manifold vertex fan");
        }
        if (ring.size() != succ.size()) throw InvalidInput("SurfaceMesh: disconnected vertex fan");
    }

    m.key_ = compute_key(m.vertices);
    return m;
}

/// Subdivided icosahedron. Level l has 10*4^l + 2 vertices; the first
/// 10*4^(l-1) + 2 of them coincide with the level l-1 sphere (nesting).
struct IcoSphere {
    int level = 0;
    SurfaceMesh mesh;
    /// For each vertex introduced at this level (index >= coarse vertex
    /// count), the two endpoints of the split edge at level-1.
    std::vector<std::array<int, 2>> parent_vertex_pairs;

    int coarse_vertex_count() const {
        return level == 0 ? 0 : ico_vertex_count(level - 1);
    }

    static int ico_vertex_count(int level) { return 10 * (1 << (2 * level)) + 2; }
    static int ico_face_count(int level) { return 20 * (1 << (2 * level)); }
};

namespace detail {

inline std::pair<std::vector<Vec3>, std::vector<FaceTri>> base_icosahedron() {
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts;
    for (double s1 : {-1.0, 1.0})
        for (double s2 : {-phi, phi}) {
            verts.push_back(normalized(Vec3{s1, s2, 0.0}));
            verts.push_back(normalized(Vec3{0.0, s1, s2}));
            verts.push_back(normalized(Vec3{s2, 0.0, s1}));
        }
    std::sort(verts.begin(), verts.end(), [](const Vec3& a, const Vec3& b) {
        if (a.x != b.x) return a.x < b.x;
        if (a.y != b.y) return a.y < b.y;
        return a.z < b.z;
    });

    // Neighbors are the vertex pairs at the icosahedron edge length
    // (~1.0515 at circumradius 1; the next distance up is ~1.7013).
    std::vector<FaceTri> faces;
    auto adjacent = [&](int i, int j) { return norm(verts[i] - verts[j]) < 1.2; };
    for (int i = 0; i < 12; ++i)
        for (int j = i + 1; j < 12; ++j) {
            if (!adjacent(i, j)) continue;
            for (int k = j + 1; k < 12; ++k) {
                if (adjacent(i, k) && adjacent(j, k)) {
                    FaceTri f{i, j, k};
                    if (oriented_area(verts[f[0]], verts[f[1]], verts[f[2]]) < 0.0)
                        std::swap(f[1], f[2]);
                    faces.push_back(f);
                }
            }
        }
    return {std::move(verts), std::move(faces)};
}

/// Rotate each face triple so the smallest index leads (orientation kept),
/// then order faces lexicographically.
inline void canonicalize_faces(std::vector<FaceTri>& faces) {
    for (FaceTri& f : faces) {
        int r = 0;
        if (f[1] < f[r]) r = 1;
        if (f[2] < f[r]) r = 2;
        f = {f[r], f[(r + 1) % 3], f[(r + 2) % 3]};
    }
    std::sort(faces.begin(), faces.end());
}

}  // namespace detail

inline IcoSphere build_icosphere(int level) {
    if (level < 0 || level > 7) throw InvalidInput("build_icosphere: level must be in 0..7");

    auto [verts, faces] = detail::base_icosahedron();
    detail::canonicalize_faces(faces);
    std::vector<std::array<int, 2>> parents;

    for (int l = 1; l <= level; ++l) {
        // New midpoint vertices are appended in sorted-edge order.
        std::map<std::pair<int, int>, int> midpoint;
        for (const FaceTri& f : faces)
            for (int k = 0; k < 3; ++k) {
                const int i = f[k], j = f[(k + 1) % 3];
                midpoint[{std::min(i, j), std::max(i, j)}] = -1;
            }
        parents.clear();
        for (auto& [e, idx] : midpoint) {
            idx = static_cast<int>(verts.size());
            verts.push_back(normalized((verts[e.first] + verts[e.second]) * 0.5));
            parents.push_back({e.first, e.second});
        }

        std::vector<FaceTri> next;
        next.reserve(faces.size() * 4);
        for (const FaceTri& f : faces) {
            const int a = f[0], b = f[1], c = f[2];
            const int ab = midpoint[{std::min(a, b), std::max(a, b)}];
            const int bc = midpoint[{std::min(b, c), std::max(b, c)}];
            const int ca = midpoint[{std::min(c, a), std::max(c, a)}];
            next.push_back({a, ab, ca});
            next.push_back({b, bc, ab});
            next.push_back({c, ca, bc});
            next.push_back({ab, bc, ca});
        }
        detail::canonicalize_faces(next);
        faces = std::move(next);
    }

    IcoSphere ico;
    ico.level = level;
    ico.parent_vertex_pairs = std::move(parents);
    ico.mesh = SurfaceMesh::build(std::move(verts), std::move(faces));
    return ico;
}

/// Per-vertex feature channels attached to one mesh.
struct FeatureMap {
    std::uint64_t mesh_key = 0;
    std::vector<std::string> channels;
    std::vector<double> values;  // row-major, vertex_count x channel_count
    bool normalized = false;

    int channel_count() const { return static_cast<int>(channels.size()); }
    int vertex_count() const {
        return channels.empty() ? 0 : static_cast<int>(values.size() / channels.size());
    }

    double at(int vertex, int channel) const { return values[vertex * channel_count() + channel]; }
    double& at(int vertex, int channel) { return values[vertex * channel_count() + channel]; }

    static FeatureMap zeros(const SurfaceMesh& mesh, std::vector<std::string> names) {
        FeatureMap f;
        f.mesh_key = mesh.key();
        f.channels = std::move(names);
        f.values.assign(static_cast<std::size_t>(mesh.vertex_count()) * f.channels.size(), 0.0);
        return f;
    }

    /// In-place per-channel z-score normalization (population std).
    void zscore() {
        const int n = vertex_count(), c = channel_count();
        for (int ch = 0; ch < c; ++ch) {
            double mean = 0.0;
            for (int i = 0; i < n; ++i) mean += at(i, ch);
            mean /= n;
            double var = 0.0;
            for (int i = 0; i < n; ++i) var += (at(i, ch) - mean) * (at(i, ch) - mean);
            const double sd = std::sqrt(var / n);
            if (sd < 1e-300) throw InvalidInput("zscore: channel has zero variance");
            for (int i = 0; i < n; ++i) at(i, ch) = (at(i, ch) - mean) / sd;
        }
        normalized = true;
    }
};

/// Per-vertex parcel labels (hard) or probability rows (soft).
struct ParcellationMap {
    int parcel_count = 0;
    std::vector<int> labels;       // hard form; empty when soft
    std::vector<double> soft;      // row-major vertex_count x parcel_count; empty when hard

    bool is_soft() const { return !soft.empty(); }
    int vertex_count() const {
        return is_soft() ? static_cast<int>(soft.size()) / parcel_count
                         : static_cast<int>(labels.size());
    }

    static ParcellationMap hard(std::vector<int> labels, int parcel_count) {
        for (int l : labels)
            if (l < 0 || l >= parcel_count) throw InvalidInput("ParcellationMap: label out of range");
        ParcellationMap p;
        p.parcel_count = parcel_count;
        p.labels = std::move(labels);
        return p;
    }

    ParcellationMap to_soft() const {
        if (is_soft()) return *this;
        ParcellationMap p;
        p.parcel_count = parcel_count;
        p.soft.assign(static_cast<std::size_t>(labels.size()) * parcel_count, 0.0);
        for (std::size_t i = 0; i < labels.size(); ++i)
            p.soft[i * parcel_count + labels[i]] = 1.0;
        return p;
    }

    /// Argmax per row; ties resolve to the lowest parcel index.
    ParcellationMap to_hard() const {
        if (!is_soft()) return *this;
        ParcellationMap p;
        p.parcel_count = parcel_count;
        const int n = vertex_count();
        p.labels.resize(n);
        for (int i = 0; i < n; ++i) {
            int best = 0;
            for (int q = 1; q < parcel_count; ++q)
                if (soft[i * parcel_count + q] > soft[i * parcel_count + best]) best = q;
            p.labels[i] = best;
        }
        return p;
    }
};

}  // namespace sugar
