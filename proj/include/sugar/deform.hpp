#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "sugar/errors.hpp"
#include "sugar/geometry.hpp"
#include "sugar/interp.hpp"
#include "sugar/mesh.hpp"

namespace sugar {

using EulerTriple = std::array<double, 3>;

/// Per-vertex rotation angles (alpha, beta, gamma) in radians; a single row
/// encodes one global rotation.
struct EulerField {
    std::vector<EulerTriple> angles;

    bool is_global() const { return angles.size() == 1; }
    int size() const { return static_cast<int>(angles.size()); }

    static EulerField zeros(int n) {
        EulerField f;
        f.angles.assign(n, {0.0, 0.0, 0.0});
        return f;
    }

    static EulerField global(double a, double b, double g) {
        EulerField f;
        f.angles.push_back({a, b, g});
        return f;
    }

    void validate() const {
        if (angles.empty()) throw InvalidInput("EulerField: empty");
        for (const auto& t : angles)
            for (double v : t) {
                if (!std::isfinite(v)) throw InvalidInput("EulerField: non-finite angle");
                if (std::abs(v) >= kPi) throw InvalidInput("EulerField: |angle| must be < pi");
            }
    }
};

using RotationTensor = std::vector<Mat3>;

/// Frequency-stacked sinusoidal encoding of one coordinate in [0,1]:
/// (sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x), x).
inline void encode_coordinate(double pos, int L, std::vector<double>& out) {
    if (pos < 0.0 || pos > 1.0) throw InvalidInput("positional_encode: coordinate outside [0,1]");
    double freq = kPi;
    for (int l = 0; l < L; ++l) {
        out.push_back(std::sin(freq * pos));
        out.push_back(std::cos(freq * pos));
        freq *= 2.0;
    }
    out.push_back(pos);
}

/// Concatenated encodings of (rho, theta); length 2*(2L+1).
inline std::vector<double> positional_encode(double rho, double theta, int L = 4) {
    std::vector<double> out;
    out.reserve(2 * (2 * L + 1));
    encode_coordinate(rho, L, out);
    encode_coordinate(theta, L, out);
    return out;
}

/// Row-major N x 2(2L+1) positional feature block for a vertex set.
inline std::vector<double> positional_features(const std::vector<Vec3>& verts, int L = 4) {
    std::vector<double> rows;
    rows.reserve(verts.size() * 2 * (2 * L + 1));
    for (const Vec3& v : verts) {
        const auto [rho, theta] = cart_to_sph(v);
        encode_coordinate(rho, L, rows);
        encode_coordinate(theta, L, rows);
    }
    return rows;
}

/// Rotation about z by alpha, then y by beta, then x by gamma, written out
/// entry by entry.
inline Mat3 rotation_from_euler(double alpha, double beta, double gamma) {
    const double ca = std::cos(alpha), sa = std::sin(alpha);
    const double cb = std::cos(beta), sb = std::sin(beta);
    const double cg = std::cos(gamma), sg = std::sin(gamma);
    Mat3 r;
    r.m = {{{ca * cb, ca * sb * sg - cg * sa, sa * sg + ca * cg * sb},
            {cb * sa, ca * cg + sa * sb * sg, cg * sa * sb - ca * sg},
            {-sb, cb * sg, cb * cg}}};
    return r;
}

/// Entry-wise partial derivatives of rotation_from_euler.
inline void rotation_derivatives(double alpha, double beta, double gamma, Mat3& d_alpha,
                                 Mat3& d_beta, Mat3& d_gamma) {
    const double ca = std::cos(alpha), sa = std::sin(alpha);
    const double cb = std::cos(beta), sb = std::sin(beta);
    const double cg = std::cos(gamma), sg = std::sin(gamma);
    d_alpha.m = {{{-sa * cb, -sa * sb * sg - cg * ca, ca * sg - sa * cg * sb},
                  {cb * ca, -sa * cg + ca * sb * sg, cg * ca * sb + sa * sg},
                  {0.0, 0.0, 0.0}}};
    d_beta.m = {{{-ca * sb, ca * cb * sg, ca * cg * cb},
                 {-sb * sa, sa * cb * sg, cg * sa * cb},
                 {-cb, -sb * sg, -sb * cg}}};
    d_gamma.m = {{{0.0, ca * sb * cg + sg * sa, sa * cg - ca * sg * sb},
                  {0.0, -ca * sg + sa * sb * cg, -sg * sa * sb - ca * cg},
                  {0.0, cb * cg, -cb * sg}}};
}

/// Angles of a rotation matrix in the same z-y-x convention. Valid away
/// from beta = +-pi/2; deformation fields stay far from gimbal lock.
inline EulerTriple euler_from_rotation(const Mat3& r) {
    const double beta = std::asin(std::clamp(-r.m[2][0], -1.0, 1.0));
    const double alpha = std::atan2(r.m[1][0], r.m[0][0]);
    const double gamma = std::atan2(r.m[2][1], r.m[2][2]);
    return {alpha, beta, gamma};
}

inline RotationTensor euler_to_rotation(const EulerField& field) {
    field.validate();
    RotationTensor out;
    out.reserve(field.angles.size());
    for (const auto& [a, b, g] : field.angles) out.push_back(rotation_from_euler(a, b, g));
    return out;
}

/// Vertex i moves to R_i * v_i (or R_0 * v_i for a global tensor);
/// connectivity and feature association are untouched.
inline SurfaceMesh warp(const SurfaceMesh& mesh, const RotationTensor& rot) {
    const int n = mesh.vertex_count();
    if (!(static_cast<int>(rot.size()) == n || rot.size() == 1))
        throw InvalidInput("warp: rotation tensor size must be 1 or the vertex count");
    std::vector<Vec3> moved(n);
    if (rot.size() == 1) {
        for (int i = 0; i < n; ++i) moved[i] = rot[0] * mesh.vertices[i];
    } else {
        for (int i = 0; i < n; ++i) moved[i] = rot[i] * mesh.vertices[i];
    }
    return mesh.with_vertices(std::move(moved));
}

inline SurfaceMesh warp(const SurfaceMesh& mesh, const EulerField& field) {
    return warp(mesh, euler_to_rotation(field));
}

/// Componentwise barycentric interpolation of a per-vertex angle field from
/// ico_l onto ico_{l+1}. Nested coarse vertices reproduce exactly.
inline EulerField upsample_euler(const EulerField& field, const IcoSphere& coarse,
                                 const IcoSphere& fine) {
    if (fine.level != coarse.level + 1)
        throw InvalidInput("upsample_euler: target must be one level finer");
    if (field.size() != coarse.mesh.vertex_count())
        throw InvalidInput("upsample_euler: field size does not match the coarse sphere");

    FeatureMap comp;
    comp.mesh_key = coarse.mesh.key();
    comp.channels = {"alpha", "beta", "gamma"};
    comp.values.resize(static_cast<std::size_t>(field.size()) * 3);
    for (int i = 0; i < field.size(); ++i)
        for (int k = 0; k < 3; ++k) comp.values[i * 3 + k] = field.angles[i][k];

    const FeatureMap up = resample(coarse.mesh, comp, fine.mesh);
    EulerField out;
    out.angles.resize(fine.mesh.vertex_count());
    for (int i = 0; i < fine.mesh.vertex_count(); ++i)
        out.angles[i] = {up.values[i * 3], up.values[i * 3 + 1], up.values[i * 3 + 2]};
    return out;
}

/// Per-vertex composition R(increment_i) * R(base_i), returned as angles.
inline EulerField compose_euler(const EulerField& increment, const EulerField& base) {
    if (increment.size() != base.size() && base.size() != 1 && increment.size() != 1)
        throw InvalidInput("compose_euler: size mismatch");
    const int n = std::max(increment.size(), base.size());
    EulerField out;
    out.angles.resize(n);
    for (int i = 0; i < n; ++i) {
        const auto& d = increment.angles[increment.size() == 1 ? 0 : i];
        const auto& b = base.angles[base.size() == 1 ? 0 : i];
        const Mat3 r = rotation_from_euler(d[0], d[1], d[2]) * rotation_from_euler(b[0], b[1], b[2]);
        out.angles[i] = euler_from_rotation(r);
    }
    return out;
}

}  // namespace sugar
