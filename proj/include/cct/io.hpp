#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cct/core.hpp"
#include "cct/dataset.hpp"
#include "cct/predictor.hpp"
#include "cct/systems.hpp"

namespace cct {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Pretty JSON with a trailing newline. nlohmann prints doubles round-trip exact, so a file
/// written and read back reproduces every value bit for bit.
inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) { return nlohmann::json::parse(read_text(path)); }

/// 64-bit FNV-1a of a byte string, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ---------------------------------------------------------------------------
// Trajectory CSV: t, x0..x{n-1}, u0..u{m-1}[, zeta0..zeta{n-1}]
// ---------------------------------------------------------------------------

inline std::string record_to_csv(const TrajectoryRecord& rec) {
    std::ostringstream os;
    os << std::setprecision(17);
    const auto n = rec.state_dim(), m = rec.input_dim();
    os << 't';
    for (Eigen::Index i = 0; i < n; ++i) os << ",x" << i;
    for (Eigen::Index i = 0; i < m; ++i) os << ",u" << i;
    if (rec.has_uncertainties())
        for (Eigen::Index i = 0; i < n; ++i) os << ",zeta" << i;
    os << '\n';
    for (std::size_t k = 0; k < rec.size(); ++k) {
        os << rec.times[k];
        for (Eigen::Index i = 0; i < n; ++i) os << ',' << rec.states[k][i];
        for (Eigen::Index i = 0; i < m; ++i) os << ',' << rec.inputs[k][i];
        if (rec.has_uncertainties())
            for (Eigen::Index i = 0; i < n; ++i) os << ',' << rec.uncertainties[k][i];
        os << '\n';
    }
    return os.str();
}

inline TrajectoryRecord record_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw Error("trajectory CSV: missing header");
    Eigen::Index n = 0, m = 0, z = 0;
    {
        std::istringstream hs(line);
        std::string col;
        while (std::getline(hs, col, ',')) {
            if (col.rfind("zeta", 0) == 0) ++z;
            else if (col[0] == 'x') ++n;
            else if (col[0] == 'u') ++m;
        }
    }
    if (z != 0 && z != n) throw Error("trajectory CSV: zeta columns must match the state dimension");
    TrajectoryRecord rec;
    std::vector<double> row;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        row.clear();
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<Eigen::Index>(row.size()) != 1 + n + m + z) throw Error("trajectory CSV: ragged row");
        rec.times.push_back(row[0]);
        rec.states.push_back(Eigen::Map<const Vector>(row.data() + 1, n));
        rec.inputs.push_back(Eigen::Map<const Vector>(row.data() + 1 + n, m));
        if (z) rec.uncertainties.push_back(Eigen::Map<const Vector>(row.data() + 1 + n + m, z));
    }
    rec.dt = rec.times.size() > 1 ? rec.times[1] - rec.times[0] : 0.0;
    rec.validate();
    return rec;
}

inline void write_record_csv(const fs::path& path, const TrajectoryRecord& rec) { write_text(path, record_to_csv(rec)); }

inline TrajectoryRecord read_record_csv(const fs::path& path) { return record_from_csv(read_text(path)); }

inline std::string record_file_name(std::size_t id) {
    std::ostringstream os;
    os << "record_" << std::setw(5) << std::setfill('0') << id << ".csv";
    return os.str();
}

// ---------------------------------------------------------------------------
// Dataset directories: one CSV per record plus manifest.json
// ---------------------------------------------------------------------------

/// Writes the records, then the manifest (last, so a present manifest marks a complete directory).
inline void write_dataset_dir(const fs::path& dir, const TrainingDataset& ds, nlohmann::json extra = {}) {
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::array();
    std::string all;
    for (const auto& r : ds.records) {
        const std::string text = record_to_csv(r.trajectory);
        all += text;
        write_text(dir / record_file_name(r.id), text);
        files.push_back({{"id", r.id}, {"file", record_file_name(r.id)}});
    }
    nlohmann::json man = extra.is_object() ? extra : nlohmann::json::object();
    man["split"] = to_string(ds.split);
    man["records"] = files;
    man["content_hash"] = fnv1a_hex(all);
    write_json(dir / "manifest.json", man);
}

inline TrainingDataset read_dataset_dir(const fs::path& dir) {
    const auto man = read_json(dir / "manifest.json");
    TrainingDataset ds;
    ds.split = man.at("split").get<std::string>() == "train" ? SplitTag::train : SplitTag::cal;
    for (const auto& f : man.at("records"))
        ds.records.push_back({f.at("id").get<std::size_t>(), read_record_csv(dir / f.at("file").get<std::string>())});
    return ds;
}

inline std::string dataset_hash(const fs::path& dir) { return read_json(dir / "manifest.json").at("content_hash"); }

/// References persist as nominal record CSVs; x0 and the generating knots go in the manifest.
inline void write_reference_dir(const fs::path& dir, const std::vector<ReferenceSample>& refs, nlohmann::json extra = {}) {
    fs::create_directories(dir);
    nlohmann::json items = nlohmann::json::array();
    std::string all;
    for (const auto& r : refs) {
        const std::string text = record_to_csv(r.record);
        all += text;
        write_text(dir / record_file_name(r.id), text);
        nlohmann::json knots = nlohmann::json::array();
        for (const auto& k : r.signal.knots) knots.push_back(to_std(k));
        items.push_back({{"id", r.id},
                         {"file", record_file_name(r.id)},
                         {"x0", to_std(r.x0)},
                         {"knot_spacing_s", r.signal.spacing},
                         {"knots", knots}});
    }
    nlohmann::json man = extra.is_object() ? extra : nlohmann::json::object();
    man["references"] = items;
    man["content_hash"] = fnv1a_hex(all);
    write_json(dir / "manifest.json", man);
}

inline std::vector<ReferenceSample> read_reference_dir(const fs::path& dir) {
    const auto man = read_json(dir / "manifest.json");
    std::vector<ReferenceSample> out;
    for (const auto& it : man.at("references")) {
        ReferenceSample r;
        r.id = it.at("id").get<std::size_t>();
        r.x0 = from_std(it.at("x0").get<std::vector<double>>());
        r.signal.spacing = it.at("knot_spacing_s").get<double>();
        for (const auto& k : it.at("knots")) r.signal.knots.push_back(from_std(k.get<std::vector<double>>()));
        r.record = read_record_csv(dir / it.at("file").get<std::string>());
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Score files: one score per line, "inf" allowed
// ---------------------------------------------------------------------------

inline std::string scores_to_csv(const std::vector<double>& scores) {
    std::ostringstream os;
    os << "score\n" << std::setprecision(17);
    for (double s : scores) os << s << '\n';
    return os.str();
}

inline std::vector<double> read_scores_csv(const fs::path& path) {
    std::istringstream is(read_text(path));
    std::string line;
    std::vector<double> out;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line == "score") continue;
        }
        out.push_back(std::stod(line));
    }
    return out;
}

}  // namespace cct
