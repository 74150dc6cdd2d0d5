#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <vector>

#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"
#include "sugar/mesh.hpp"

namespace sugar {

/// Exact k-nearest-neighbor index over 3D points. Ties in distance resolve
/// to the smaller point index, so query results are deterministic.
class KdTree3 {
public:
    KdTree3() = default;

    explicit KdTree3(const std::vector<Vec3>& points) : points_(points) {
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), 0);
        nodes_.reserve(points_.size() * 2);
        root_ = build(0, static_cast<int>(points_.size()));
    }

    struct Neighbor {
        double dist2;
        int index;
        bool operator<(const Neighbor& o) const {
            return dist2 != o.dist2 ? dist2 < o.dist2 : index < o.index;
        }
    };

    /// k nearest points to q, ascending by (distance, index).
    void knn(const Vec3& q, int k, std::vector<Neighbor>& out) const {
        out.clear();
        if (k <= 0) return;
        k = std::min<int>(k, static_cast<int>(points_.size()));
        search(root_, q, k, out);
        std::sort(out.begin(), out.end());
    }

    int size() const { return static_cast<int>(points_.size()); }

private:
    struct Node {
        int axis = -1;     // -1 marks a leaf
        double split = 0;
        int left = -1, right = -1;
        int begin = 0, end = 0;  // leaf range into order_
    };

    static constexpr int kLeafSize = 8;

    int build(int begin, int end) {
        Node node;
        if (end - begin <= kLeafSize) {
            node.begin = begin;
            node.end = end;
            nodes_.push_back(node);
            return static_cast<int>(nodes_.size()) - 1;
        }
        Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
        for (int i = begin; i < end; ++i) {
            const Vec3& p = points_[order_[i]];
            lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
            hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
        }
        const Vec3 ext = hi - lo;
        int axis = 0;
        if (ext.y > ext[axis]) axis = 1;
        if (ext.z > ext[axis]) axis = 2;
        const int mid = (begin + end) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](int a, int b) {
                             const double pa = points_[a][axis], pb = points_[b][axis];
                             return pa != pb ? pa < pb : a < b;
                         });
        node.axis = axis;
        node.split = points_[order_[mid]][axis];
        const int self = static_cast<int>(nodes_.size());
        nodes_.push_back(node);
        const int l = build(begin, mid);
        const int r = build(mid, end);
        nodes_[self].left = l;
        nodes_[self].right = r;
        return self;
    }

    void consider(const Vec3& q, int k, int idx, std::vector<Neighbor>& heap) const {
        const Neighbor cand{norm2(points_[idx] - q), idx};
        if (static_cast<int>(heap.size()) < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end());
        }
    }

    void search(int ni, const Vec3& q, int k, std::vector<Neighbor>& heap) const {
        const Node& node = nodes_[ni];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) consider(q, k, order_[i], heap);
            return;
        }
        const double delta = q[node.axis] - node.split;
        const int near = delta < 0 ? node.left : node.right;
        const int far = delta < 0 ? node.right : node.left;
        search(near, q, k, heap);
        if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().dist2)
            search(far, q, k, heap);
    }

    std::vector<Vec3> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

/// Containing face plus barycentric weights for a unit-vector query.
struct BarycentricHit {
    int face = -1;
    std::array<double, 3> weights{};
    Vec3 intersect;  // ray-plane intersection, generally norm <= 1
};

/// KNN-backed containing-face search over a closed sphere mesh.
///
/// A query's candidate faces are the union of faces incident to its kappa
/// nearest vertices, tested in face-index order. Containment follows the
/// edge-cross-product test; the tolerance is applied to the normalized
/// weights so boundary points are admitted at every mesh resolution.
class FaceLocator {
public:
    FaceLocator(const SurfaceMesh& mesh, int kappa = 8)
        : mesh_(&mesh), kappa_(kappa), tree_(mesh.vertices) {
        if (kappa_ < 1) throw InvalidInput("FaceLocator: kappa must be >= 1");
        for (int i = 0; i < mesh.vertex_count(); ++i) {
            if (mesh.vertex_faces(i).empty())
                throw InvalidInput("FaceLocator: isolated vertex");
            if (mesh.vertex_faces(i).size() > 12)
                throw InvalidInput("FaceLocator: vertex with more than 12 incident faces");
        }
    }

    const SurfaceMesh& mesh() const { return *mesh_; }
    int kappa() const { return kappa_; }

    /// Candidate faces for a query, ascending and deduplicated.
    std::vector<int> candidate_faces(const Vec3& q) const {
        tree_.knn(q, kappa_, scratch_);
        std::vector<int> cand;
        cand.reserve(scratch_.size() * 6);
        for (const auto& nb : scratch_) {
            const auto& inc = mesh_->vertex_faces(nb.index);
            cand.insert(cand.end(), inc.begin(), inc.end());
        }
        std::sort(cand.begin(), cand.end());
        cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
        return cand;
    }

    /// Ray-plane intersection and normalized containment weights for one
    /// face. Returns false when the ray is parallel to the face plane, the
    /// face is degenerate, or any weight falls below -1e-12.
    bool test_face(int t, const Vec3& q, BarycentricHit& hit) const {
        const FaceTri& f = mesh_->faces[t];
        const Vec3& a = mesh_->vertices[f[0]];
        const Vec3& b = mesh_->vertices[f[1]];
        const Vec3& c = mesh_->vertices[f[2]];
        Vec3 n = normalized(cross(b - a, c - a));
        if (dot(n, a + b + c) < 0.0) n = -n;
        const double denom = dot(q, n);
        if (denom <= 1e-12) return false;
        const double s = dot(a, n) / denom;
        const Vec3 p = q * s;

        // omega_i = <e_ij x (p - v_i), e_ij x e_ik>; each omega is the
        // barycentric coordinate of the third corner scaled by |e_ij x e_ik|^2.
        const double w0 = dot(cross(c - b, p - b), cross(c - b, a - b));
        const double w1 = dot(cross(a - c, p - c), cross(a - c, b - c));
        const double w2 = dot(cross(b - a, p - a), cross(b - a, c - a));
        const double sum = w0 + w1 + w2;
        if (sum <= 0.0) return false;
        const std::array<double, 3> w{w0 / sum, w1 / sum, w2 / sum};
        if (w[0] < -1e-12 || w[1] < -1e-12 || w[2] < -1e-12) return false;
        hit.face = t;
        hit.weights = w;
        hit.intersect = p;
        return true;
    }

    /// Containing face of a unit vector. Falls back to an exhaustive scan
    /// when the candidate set misses; throws if no face contains the query.
    BarycentricHit locate(const Vec3& q) const {
        tree_.knn(q, kappa_, scratch_);
        // Exact vertex hit: return the smallest incident face with weight 1
        // on that corner. Keeps nested-vertex resampling bit-exact.
        if (!scratch_.empty() && scratch_.front().dist2 == 0.0) {
            const int v = scratch_.front().index;
            const auto& inc = mesh_->vertex_faces(v);
            const int t = *std::min_element(inc.begin(), inc.end());
            BarycentricHit hit;
            hit.face = t;
            const FaceTri& f = mesh_->faces[t];
            for (int k = 0; k < 3; ++k) hit.weights[k] = (f[k] == v) ? 1.0 : 0.0;
            hit.intersect = mesh_->vertices[v];
            return hit;
        }

        std::vector<int> cand;
        cand.reserve(scratch_.size() * 6);
        for (const auto& nb : scratch_) {
            const auto& inc = mesh_->vertex_faces(nb.index);
            cand.insert(cand.end(), inc.begin(), inc.end());
        }
        std::sort(cand.begin(), cand.end());
        cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

        BarycentricHit hit;
        for (int t : cand)
            if (test_face(t, q, hit)) return hit;
        for (int t = 0; t < mesh_->face_count(); ++t)
            if (test_face(t, q, hit)) return hit;
        throw InvalidInput("FaceLocator::locate: no face contains the query (non-covering mesh)");
    }

    /// Barycentric blend of the hit face's vertex values, one per channel.
    std::vector<double> interpolate(const FeatureMap& features, const BarycentricHit& hit) const {
        if (features.mesh_key != mesh_->key())
            throw InvalidInput("interpolate: features belong to a different mesh");
        const FaceTri& f = mesh_->faces[hit.face];
        const int c = features.channel_count();
        std::vector<double> out(c);
        for (int ch = 0; ch < c; ++ch)
            out[ch] = hit.weights[0] * features.at(f[0], ch) +
                      hit.weights[1] * features.at(f[1], ch) +
                      hit.weights[2] * features.at(f[2], ch);
        return out;
    }

private:
    const SurfaceMesh* mesh_;
    int kappa_;
    KdTree3 tree_;
    mutable std::vector<KdTree3::Neighbor> scratch_;
};

inline FaceLocator build_locator(const SurfaceMesh& mesh, int kappa = 8) {
    return FaceLocator(mesh, kappa);
}

/// One locate-and-blend per destination vertex. Channel names carry over;
/// the normalized flag is cleared because blending shifts the moments.
inline FeatureMap resample(const FaceLocator& src_locator, const FeatureMap& src_features,
                           const SurfaceMesh& dst_mesh) {
    if (src_features.mesh_key != src_locator.mesh().key())
        throw InvalidInput("resample: features belong to a different mesh");
    if (dst_mesh.key() == src_locator.mesh().key() &&
        dst_mesh.vertex_count() == src_locator.mesh().vertex_count()) {
        FeatureMap out = src_features;
        out.normalized = false;
        return out;
    }
    FeatureMap out;
    out.mesh_key = dst_mesh.key();
    out.channels = src_features.channels;
    const int n = dst_mesh.vertex_count(), c = src_features.channel_count();
    out.values.resize(static_cast<std::size_t>(n) * c);
    const FaceTri* faces = src_locator.mesh().faces.data();
    for (int i = 0; i < n; ++i) {
        const BarycentricHit hit = src_locator.locate(dst_mesh.vertices[i]);
        const FaceTri& f = faces[hit.face];
        for (int ch = 0; ch < c; ++ch)
            out.values[static_cast<std::size_t>(i) * c + ch] =
                hit.weights[0] * src_features.at(f[0], ch) +
                hit.weights[1] * src_features.at(f[1], ch) +
                hit.weights[2] * src_features.at(f[2], ch);
    }
    out.normalized = false;
    return out;
}

inline FeatureMap resample(const SurfaceMesh& src_mesh, const FeatureMap& src_features,
                           const SurfaceMesh& dst_mesh, int kappa = 8) {
    return resample(FaceLocator(src_mesh, kappa), src_features, dst_mesh);
}

}  // namespace sugar
