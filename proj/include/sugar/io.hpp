#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sugar/deform.hpp"
#include "sugar/errors.hpp"
#include "sugar/mesh.hpp"
#include "sugar/net.hpp"

namespace sugar {

static_assert(std::endian::native == std::endian::little,
              "model checkpoints are little-endian; big-endian hosts are unsupported");

namespace detail {

/// Shortest-exact decimal for doubles (%.17g survives strtod round-trips).
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw IoError("bad numeric token: " + tok);
    return v;
}

inline long parse_long(const std::string& tok) {
    char* end = nullptr;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0') throw IoError("bad integer token: " + tok);
    return v;
}

/// Writes through a temporary file and renames into place.
inline void commit_file(const std::filesystem::path& path, const std::string& contents,
                        bool binary) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, binary ? std::ios::binary : std::ios::out);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + " (" + ec.message() + ")");
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

}  // namespace detail

/// In-memory form of the text mesh format: geometry plus optional feature
/// channels and hard parcel labels.
struct MeshFileData {
    std::vector<Vec3> vertices;
    std::vector<FaceTri> faces;
    int channel_count = 0;
    std::vector<double> values;  // N x channel_count
    int parcel_count = 0;
    std::vector<int> labels;     // size N when parcel_count > 0
};

inline void write_mesh_file(const std::filesystem::path& path, const MeshFileData& data) {
    const int n = static_cast<int>(data.vertices.size());
    const int t = static_cast<int>(data.faces.size());
    std::string out;
    out.reserve(static_cast<std::size_t>(n) * 64 + static_cast<std::size_t>(t) * 16);
    out += "SUGARMESH 1\n";
    out += "vertices " + std::to_string(n) + " faces " + std::to_string(t) + " channels " +
           std::to_string(data.channel_count) + " parcels " + std::to_string(data.parcel_count) +
           "\n";
    for (int i = 0; i < n; ++i) {
        out += detail::fmt_double(data.vertices[i].x) + " " +
               detail::fmt_double(data.vertices[i].y) + " " + detail::fmt_double(data.vertices[i].z);
        for (int c = 0; c < data.channel_count; ++c)
            out += " " + detail::fmt_double(data.values[static_cast<std::size_t>(i) * data.channel_count + c]);
        if (data.parcel_count > 0) out += " " + std::to_string(data.labels[i]);
        out += "\n";
    }
    for (const FaceTri& f : data.faces)
        out += std::to_string(f[0]) + " " + std::to_string(f[1]) + " " + std::to_string(f[2]) + "\n";
    detail::commit_file(path, out, false);
}

inline MeshFileData read_mesh_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "SUGARMESH 1")
        throw IoError("not a SUGARMESH 1 file: " + path.string());
    if (!std::getline(in, line)) throw IoError("truncated header: " + path.string());
    const auto toks = detail::split_ws(line);
    if (toks.size() != 8 || toks[0] != "vertices" || toks[2] != "faces" || toks[4] != "channels" ||
        toks[6] != "parcels")
        throw IoError("bad counts line: " + path.string());
    const int n = static_cast<int>(detail::parse_long(toks[1]));
    const int t = static_cast<int>(detail::parse_long(toks[3]));
    MeshFileData data;
    data.channel_count = static_cast<int>(detail::parse_long(toks[5]));
    data.parcel_count = static_cast<int>(detail::parse_long(toks[7]));
    if (n < 0 || t < 0 || data.channel_count < 0 || data.parcel_count < 0)
        throw IoError("negative counts: " + path.string());
    data.vertices.resize(n);
    data.values.resize(static_cast<std::size_t>(n) * data.channel_count);
    if (data.parcel_count > 0) data.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        if (!std::getline(in, line)) throw IoError("truncated vertex block: " + path.string());
        const auto v = detail::split_ws(line);
        const std::size_t want = 3 + data.channel_count + (data.parcel_count > 0 ? 1 : 0);
        if (v.size() != want) throw IoError("bad vertex line: " + path.string());
        data.vertices[i] = {detail::parse_double(v[0]), detail::parse_double(v[1]),
                            detail::parse_double(v[2])};
        for (int c = 0; c < data.channel_count; ++c)
            data.values[static_cast<std::size_t>(i) * data.channel_count + c] =
                detail::parse_double(v[3 + c]);
        if (data.parcel_count > 0) {
            const long lab = detail::parse_long(v.back());
            if (lab < 0 || lab >= data.parcel_count) throw IoError("label out of range");
            data.labels[i] = static_cast<int>(lab);
        }
    }
    data.faces.resize(t);
    for (int k = 0; k < t; ++k) {
        if (!std::getline(in, line)) throw IoError("truncated face block: " + path.string());
        const auto v = detail::split_ws(line);
        if (v.size() != 3) throw IoError("bad face line: " + path.string());
        for (int j = 0; j < 3; ++j) {
            const long idx = detail::parse_long(v[j]);
            if (idx < 0 || idx >= n) throw IoError("face index out of range");
            data.faces[k][j] = static_cast<int>(idx);
        }
    }
    return data;
}

inline void write_deform_file(const std::filesystem::path& path, const EulerField& field) {
    std::string out = "SUGARDEF 1\n";
    out += "vertices " + std::to_string(field.size()) + "\n";
    for (const auto& a : field.angles)
        out += detail::fmt_double(a[0]) + " " + detail::fmt_double(a[1]) + " " +
               detail::fmt_double(a[2]) + "\n";
    detail::commit_file(path, out, false);
}

inline EulerField read_deform_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "SUGARDEF 1")
        throw IoError("not a SUGARDEF 1 file: " + path.string());
    if (!std::getline(in, line)) throw IoError("truncated header: " + path.string());
    const auto toks = detail::split_ws(line);
    if (toks.size() != 2 || toks[0] != "vertices") throw IoError("bad counts line");
    const long n = detail::parse_long(toks[1]);
    EulerField field;
    field.angles.resize(n);
    for (long i = 0; i < n; ++i) {
        if (!std::getline(in, line)) throw IoError("truncated deform block");
        const auto v = detail::split_ws(line);
        if (v.size() != 3) throw IoError("bad deform line");
        for (int k = 0; k < 3; ++k) {
            field.angles[i][k] = detail::parse_double(v[k]);
            if (!std::isfinite(field.angles[i][k])) throw IoError("non-finite angle");
        }
    }
    return field;
}

/// Binary checkpoint: a two-line text header (magic, config) followed by the
/// raw little-endian 64-bit parameter values in declaration order.
inline void write_model(const std::filesystem::path& path, const ModelParams& model) {
    std::string widths;
    for (std::size_t i = 0; i < model.config.encoder_widths.size(); ++i) {
        if (i) widths += ",";
        widths += std::to_string(model.config.encoder_widths[i]);
    }
    std::string out = "SUGARMODEL 1\n";
    out += "level " + std::to_string(model.config.level) + " in_channels " +
           std::to_string(model.config.in_channels) + " widths " + widths + " heads " +
           std::to_string(model.config.heads) + " slope " + detail::fmt_double(model.config.leaky_slope) +
           " mode " + (model.config.output_mode == OutputMode::Global ? "global" : "pervertex") +
           " seed " + std::to_string(model.seed) + " count " + std::to_string(model.values.size()) +
           "\n";
    const std::size_t head = out.size();
    out.resize(head + model.values.size() * sizeof(double));
    std::memcpy(out.data() + head, model.values.data(), model.values.size() * sizeof(double));
    detail::commit_file(path, out, true);
}

inline ModelParams read_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "SUGARMODEL 1")
        throw IoError("not a SUGARMODEL 1 file: " + path.string());
    if (!std::getline(in, line)) throw IoError("truncated model header");
    const auto toks = detail::split_ws(line);
    if (toks.size() != 16 || toks[0] != "level" || toks[2] != "in_channels" || toks[4] != "widths" ||
        toks[6] != "heads" || toks[8] != "slope" || toks[10] != "mode" || toks[12] != "seed" ||
        toks[14] != "count")
        throw IoError("bad model config line");
    ModelParams m;
    m.config.level = static_cast<int>(detail::parse_long(toks[1]));
    m.config.in_channels = static_cast<int>(detail::parse_long(toks[3]));
    m.config.encoder_widths.clear();
    {
        std::string w = toks[5];
        std::size_t pos = 0;
        while (pos != std::string::npos) {
            const std::size_t comma = w.find(',', pos);
            const std::string item = w.substr(pos, comma == std::string::npos ? comma : comma - pos);
            m.config.encoder_widths.push_back(static_cast<int>(detail::parse_long(item)));
            pos = comma == std::string::npos ? comma : comma + 1;
        }
    }
    m.config.heads = static_cast<int>(detail::parse_long(toks[7]));
    m.config.leaky_slope = detail::parse_double(toks[9]);
    if (toks[11] == "global")
        m.config.output_mode = OutputMode::Global;
    else if (toks[11] == "pervertex")
        m.config.output_mode = OutputMode::PerVertex;
    else
        throw IoError("bad output mode: " + toks[11]);
    m.seed = static_cast<std::uint64_t>(detail::parse_long(toks[13]));
    const long count = detail::parse_long(toks[15]);
    const auto layout = m.layout();
    if (count < 0 || static_cast<std::size_t>(count) != layout.total)
        throw IoError("model parameter count does not match its config");
    m.values.resize(count);
    in.read(reinterpret_cast<char*>(m.values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
        throw IoError("truncated model parameters");
    return m;
}

/// Flat `key = value` report.
inline void write_report(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, std::string>>& entries) {
    std::string out;
    for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
    detail::commit_file(path, out, false);
}

inline std::vector<std::pair<std::string, std::string>> read_report(
    const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t sep = line.find(" = ");
        if (sep == std::string::npos) throw IoError("bad report line: " + line);
        out.emplace_back(line.substr(0, sep), line.substr(sep + 3));
    }
    return out;
}

}  // namespace sugar
