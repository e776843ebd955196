#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lbi/autoencoder.hpp"
#include "lbi/data.hpp"
#include "lbi/denoiser.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/error.hpp"
#include "lbi/ilb.hpp"
#include "lbi/lbo.hpp"
#include "lbi/schedule.hpp"

namespace lbi::io {

using json = nlohmann::json;

inline constexpr std::string_view kModelMagic = "LABMDL1\n";

// ---------------------------------------------------------------- files

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open '" + path + "' for reading", path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open '" + path + "' for writing", path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed", path);
}

inline json parse_json(std::string_view text, const std::string& context) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("invalid JSON: ") + e.what(), context);
    }
}

inline json read_json(const std::string& path) { return parse_json(read_file(path), path); }

inline void write_json(const std::string& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- vectors

inline json to_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Eigen::VectorXd vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw Error(ErrorCode::Format, what + " must be an array of numbers", what);
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw Error(ErrorCode::Format, what + " must contain only numbers", what);
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

// ---------------------------------------------------------------- model container
//
// "LABMDL1\n", one line of JSON {"kind", "meta", "arrays": [{name, rows, cols}]}
// terminated by '\n', then every array as column-major little-endian float64.

struct NamedArray {
    std::string name;
    Eigen::MatrixXd data;
};

struct ModelFile {
    std::string kind;
    json meta = json::object();
    std::vector<NamedArray> arrays;

    const Eigen::MatrixXd& array(std::string_view name) const {
        for (const auto& a : arrays)
            if (a.name == name) return a.data;
        throw Error(ErrorCode::Format, "model file has no array '" + std::string(name) + "'", kind);
    }
};

namespace detail {

inline void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

inline double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
    return std::bit_cast<double>(bits);
}

} // namespace detail

inline std::string encode_model(const ModelFile& m) {
    json header = {{"kind", m.kind}, {"meta", m.meta}, {"arrays", json::array()}};
    for (const auto& a : m.arrays)
        header["arrays"].push_back({{"name", a.name}, {"rows", a.data.rows()}, {"cols", a.data.cols()}});
    std::string out(kModelMagic);
    out += header.dump();
    out.push_back('\n');
    for (const auto& a : m.arrays)
        for (Eigen::Index k = 0; k < a.data.size(); ++k) detail::put_f64(out, a.data.data()[k]);
    return out;
}

inline ModelFile decode_model(std::string_view bytes, const std::string& context = "model") {
    if (bytes.substr(0, kModelMagic.size()) != kModelMagic)
        throw Error(ErrorCode::Format, "missing LABMDL1 magic", context);
    const std::size_t start = kModelMagic.size();
    const std::size_t nl = bytes.find('\n', start);
    if (nl == std::string_view::npos) throw Error(ErrorCode::Format, "unterminated model header", context);
    const json header = parse_json(bytes.substr(start, nl - start), context);
    ModelFile m;
    try {
        m.kind = header.at("kind").get<std::string>();
        m.meta = header.at("meta");
        std::size_t pos = nl + 1;
        for (const auto& a : header.at("arrays")) {
            const auto rows = a.at("rows").get<Eigen::Index>(), cols = a.at("cols").get<Eigen::Index>();
            if (rows < 0 || cols < 0) throw Error(ErrorCode::Format, "negative array size", context);
            const std::size_t need = static_cast<std::size_t>(rows * cols) * 8;
            if (bytes.size() - pos < need) throw Error(ErrorCode::Format, "truncated model payload", context);
            Eigen::MatrixXd data(rows, cols);
            const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
            for (Eigen::Index k = 0; k < data.size(); ++k) data.data()[k] = detail::get_f64(p + 8 * k);
            pos += need;
            m.arrays.push_back({a.at("name").get<std::string>(), std::move(data)});
        }
        if (pos != bytes.size()) throw Error(ErrorCode::Format, "trailing bytes after model payload", context);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("malformed model header: ") + e.what(), context);
    }
    return m;
}

inline void save_model(const std::string& path, const ModelFile& m) { write_file(path, encode_model(m)); }
inline ModelFile load_model(const std::string& path) { return decode_model(read_file(path), path); }

inline Eigen::MatrixXd row_of(std::span<const double> v) {
    return Eigen::Map<const Eigen::MatrixXd>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
}

inline NoiseSchedule schedule_from(const ModelFile& m) {
    const Eigen::MatrixXd& b = m.array("betas");
    return NoiseSchedule(std::vector<double>(b.data(), b.data() + b.size()));
}

inline ModelFile to_model_file(const MlpDenoiser& d) {
    const MlpShape& s = d.shape();
    ModelFile m;
    m.kind = "mlp";
    m.meta = {{"latent_dim", s.latent_dim}, {"hidden", s.hidden},  {"n_classes", s.n_classes},
              {"cond_dim", s.cond_dim},     {"t_train", s.t_train}, {"activation", "tanh"}};
    m.arrays.push_back({"betas", row_of(d.schedule().betas())});
    m.arrays.push_back({"params", d.parameters()});
    return m;
}

inline ModelFile to_model_file(const LinearGaussianDenoiser& d) {
    ModelFile m;
    m.kind = "linear_gaussian";
    m.meta = {{"latent_dim", d.latent_dim()}};
    m.arrays.push_back({"betas", row_of(d.schedule().betas())});
    m.arrays.push_back({"mu", d.mu()});
    m.arrays.push_back({"sigma", d.sigma()});
    return m;
}

inline json shape_json(const ImageShape& s) {
    return {{"height", s.height}, {"width", s.width}, {"channels", s.channels}};
}

inline ImageShape shape_from_json(const json& j) {
    try {
        return {j.at("height").get<int>(), j.at("width").get<int>(), j.value("channels", 1)};
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("bad image shape: ") + e.what(), "shape");
    }
}

inline ModelFile to_model_file(const Autoencoder& ae) {
    ModelFile m;
    m.kind = "ae_" + ae.kind();
    m.meta = {{"shape", shape_json(ae.image_shape())}, {"latent_dim", ae.latent_dim()}};
    if (const auto* lin = dynamic_cast<const LinearAutoencoder*>(&ae)) {
        m.arrays.push_back({"projection", lin->projection()});
        m.arrays.push_back({"mean", lin->mean()});
        m.arrays.push_back({"gain", lin->gain()});
    } else if (const auto* conv = dynamic_cast<const TinyConvAutoencoder*>(&ae)) {
        m.meta["seed"] = conv->seed();
    }
    return m;
}

struct LoadedDenoiser {
    std::unique_ptr<Denoiser> model;
    NoiseSchedule schedule;
};

inline LoadedDenoiser denoiser_from(const ModelFile& m) {
    NoiseSchedule sched = schedule_from(m);
    if (m.kind == "mlp") {
        MlpShape s;
        try {
            s.latent_dim = m.meta.at("latent_dim").get<int>();
            s.hidden = m.meta.at("hidden").get<int>();
            s.n_classes = m.meta.at("n_classes").get<int>();
            s.cond_dim = m.meta.at("cond_dim").get<int>();
            s.t_train = m.meta.at("t_train").get<int>();
        } catch (const json::exception& e) {
            throw Error(ErrorCode::Format, std::string("bad mlp metadata: ") + e.what(), "mlp");
        }
        const Eigen::MatrixXd& p = m.array("params");
        return {std::make_unique<MlpDenoiser>(s, sched, Eigen::VectorXd(p.reshaped())), sched};
    }
    if (m.kind == "linear_gaussian") {
        return {std::make_unique<LinearGaussianDenoiser>(Eigen::VectorXd(m.array("mu").reshaped()), m.array("sigma"),
                                                         sched),
                sched};
    }
    throw Error(ErrorCode::Format, "model file holds '" + m.kind + "', not a denoiser", m.kind);
}

inline std::unique_ptr<Autoencoder> autoencoder_from(const ModelFile& m) {
    const ImageShape shape = shape_from_json(m.meta.value("shape", json::object()));
    if (m.kind == "ae_identity") return std::make_unique<IdentityAutoencoder>(shape);
    if (m.kind == "ae_linear") {
        return std::make_unique<LinearAutoencoder>(shape, m.array("projection"),
                                                   Eigen::VectorXd(m.array("mean").reshaped()),
                                                   Eigen::VectorXd(m.array("gain").reshaped()));
    }
    if (m.kind == "ae_tiny-conv") {
        return std::make_unique<TinyConvAutoencoder>(shape, m.meta.at("seed").get<std::uint64_t>());
    }
    throw Error(ErrorCode::Format, "model file holds '" + m.kind + "', not an autoencoder", m.kind);
}

// ---------------------------------------------------------------- datasets

inline json dataset_json(const PointSet& p, std::uint64_t seed) {
    json pts = json::array();
    for (const auto& x : p.points) pts.push_back(to_json(x));
    const int dim = p.points.empty() ? 0 : static_cast<int>(p.points.front().size());
    return {{"kind", "gauss2d"}, {"seed", seed}, {"dim", dim}, {"labels", p.labels}, {"points", pts}};
}

inline json dataset_json(const std::vector<Image>& imgs, std::uint64_t seed) {
    json arr = json::array();
    for (const auto& im : imgs) arr.push_back(to_json(im.pixels));
    const ImageShape s = imgs.empty() ? ImageShape{} : imgs.front().shape;
    return {{"kind", "shapes"}, {"seed", seed}, {"shape", shape_json(s)}, {"images", arr}};
}

inline PointSet points_from_json(const json& j) {
    PointSet p;
    try {
        for (const auto& x : j.at("points")) p.points.push_back(vector_from_json(x, "points"));
        if (j.contains("labels")) p.labels = j.at("labels").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("bad point dataset: ") + e.what(), "dataset");
    }
    return p;
}

inline std::vector<Image> images_from_json(const json& j) {
    std::vector<Image> out;
    try {
        const ImageShape s = shape_from_json(j.at("shape"));
        for (const auto& x : j.at("images")) out.emplace_back(s, vector_from_json(x, "images"));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("bad image dataset: ") + e.what(), "dataset");
    }
    return out;
}

// ---------------------------------------------------------------- reports

inline json condition_json(const Condition& c) {
    return std::visit(
        [](const auto& v) -> json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Unconditional>) return nullptr;
            else if constexpr (std::is_same_v<T, ClassLabel>) return {{"label", v.k}};
            else return {{"embedding", to_json(v.v)}};
        },
        c);
}

inline Condition condition_from_json(const json& j) {
    if (j.is_null()) return Unconditional{};
    if (j.contains("label")) return ClassLabel{j.at("label").get<int>()};
    if (j.contains("embedding")) return Embedding{vector_from_json(j.at("embedding"), "embedding")};
    throw Error(ErrorCode::Format, "unrecognized condition", "condition");
}

inline json trajectory_json(const Trajectory& tr) {
    json entries = json::array();
    for (const auto& e : tr.entries) entries.push_back({{"t", e.t}, {"z", to_json(e.z)}});
    return {{"direction", std::string(to_string(tr.direction))},
            {"guidance", tr.guidance},
            {"condition", condition_json(tr.condition)},
            {"grid", std::vector<int>(tr.grid.steps().begin(), tr.grid.steps().end())},
            {"entries", entries}};
}

inline Trajectory trajectory_from_json(const json& j, int t_train) {
    Trajectory tr;
    try {
        const auto dir = j.at("direction").get<std::string>();
        if (dir != "generation" && dir != "inversion") throw Error(ErrorCode::Format, "bad direction", "trajectory");
        tr.direction = dir == "generation" ? Direction::Generation : Direction::Inversion;
        tr.guidance = j.at("guidance").get<double>();
        tr.condition = condition_from_json(j.at("condition"));
        tr.grid = TimestepGrid(j.at("grid").get<std::vector<int>>(), t_train);
        for (const auto& e : j.at("entries"))
            tr.entries.push_back({e.at("t").get<int>(), vector_from_json(e.at("z"), "z")});
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Format, std::string("bad trajectory: ") + e.what(), "trajectory");
    }
    return tr;
}

inline json lbo_reports_json(const std::vector<LboStepReport>& reps) {
    json a = json::array();
    for (const auto& r : reps)
        a.push_back({{"t", r.t}, {"iters", r.iters_used}, {"residual", r.final_residual}, {"converged", r.converged}});
    return a;
}

inline json ilb_report_json(const IlbReport& r) {
    return {{"iters_used", r.iters_used},       {"best_iter", r.best_iter},
            {"initial_l_con", r.initial_l_con}, {"initial_l_reg", r.initial_l_reg},
            {"initial_total", r.initial_total}, {"final_l_con", r.final_l_con},
            {"final_l_reg", r.final_l_reg},     {"final_total", r.final_total}};
}

// ---------------------------------------------------------------- CSV

/// RFC 4180 field: quoted when it contains a comma, quote, CR or LF; quotes doubled.
inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) out.push_back(',');
        out += csv_field(fields[i]);
    }
    out += "\r\n";
    return out;
}

/// Shortest round-trip decimal text for a double; inf, -inf and nan spelled out.
inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return json(v).dump();
}

inline std::string ilb_trace_csv(const IlbReport& r) {
    std::string out = csv_row({"iter", "l_con", "l_reg", "total"});
    for (const auto& p : r.trace)
        out += csv_row({std::to_string(p.iter), format_number(p.l_con), format_number(p.l_reg), format_number(p.total)});
    return out;
}

} // namespace lbi::io
