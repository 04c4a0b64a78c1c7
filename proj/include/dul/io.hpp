#pragma once

// On-disk formats: datasets and classifier checkpoints are a JSON header
// plus a raw little-endian f64 row-major payload; everything tabular is CSV.

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dul/concentration.hpp"
#include "dul/core.hpp"
#include "dul/dataset.hpp"
#include "dul/glm.hpp"
#include "dul/sampler.hpp"
#include "dul/spectra.hpp"

namespace dul::io {

namespace fs = std::filesystem;

/// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Stable hash of a JSON document (its compact dump).
inline std::string config_hash(const nlohmann::json& j) { return hex64(seeds::fnv1a(j.dump())); }

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kData, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kData, "cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Parses JSON, turning parse errors into data errors that name the line and
/// column of the offending byte.
inline nlohmann::json parse_json(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw Error(ErrorKind::kData,
                origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

inline nlohmann::json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

// --- raw f64 payloads ------------------------------------------------------

inline void write_f64(const fs::path& path, const double* data, std::size_t count) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kData, "cannot write " + path.string());
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, data + i, sizeof bits);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.write(bytes, 8);
  }
}

inline std::vector<double> read_f64(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kData, "cannot open " + path.string());
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    char bytes[8];
    if (!in.read(bytes, 8)) throw Error(ErrorKind::kData, path.string() + " is shorter than its header says");
    std::uint64_t bits;
    std::memcpy(&bits, bytes, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    std::memcpy(&out[i], &bits, 8);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::kData, path.string() + " is longer than its header says");
  }
  return out;
}

// --- datasets --------------------------------------------------------------

/// Writes <stem>.json and <stem>.bin.
inline void write_dataset(const fs::path& stem, const LabeledDataset& data, const std::string& config_hash = "") {
  nlohmann::json header = {{"n", data.size()},
                           {"d", data.dimension()},
                           {"dtype", "f64"},
                           {"num_classes", data.num_classes()},
                           {"class_labels", data.labels()},
                           {"provenance", data.provenance()},
                           {"config_hash", config_hash}};
  write_json(fs::path(stem.string() + ".json"), header);
  write_f64(fs::path(stem.string() + ".bin"), data.x().data(), static_cast<std::size_t>(data.x().size()));
}

inline LabeledDataset read_dataset(const fs::path& stem) {
  nlohmann::json h = read_json(fs::path(stem.string() + ".json"));
  try {
    if (h.at("dtype").get<std::string>() != "f64") throw Error(ErrorKind::kData, "unsupported dtype");
    const auto n = h.at("n").get<Eigen::Index>();
    const auto d = h.at("d").get<Eigen::Index>();
    auto labels = h.at("class_labels").get<std::vector<int>>();
    auto values = read_f64(fs::path(stem.string() + ".bin"), static_cast<std::size_t>(n * d));
    RowMatrix x = Eigen::Map<const RowMatrix>(values.data(), n, d);
    int k = h.contains("num_classes") ? h.at("num_classes").get<int>()
                                      : (labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1);
    return LabeledDataset(std::move(x), std::move(labels), k, h.value("provenance", std::string("unknown")));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, stem.string() + ".json: " + e.what());
  }
}

// --- classifier checkpoints ------------------------------------------------

inline void write_classifier(const fs::path& stem, const LinearClassifier& clf) {
  write_json(fs::path(stem.string() + ".json"), {{"d", clf.dimension()},
                                                 {"k", clf.num_classes()},
                                                 {"dtype", "f64"},
                                                 {"layout", "w then w0, row-major d x k"},
                                                 {"objective", to_string(clf.objective)}});
  RowMatrix both(2 * clf.dimension(), clf.num_classes());
  both.topRows(clf.dimension()) = clf.w;
  both.bottomRows(clf.dimension()) = clf.w0;
  write_f64(fs::path(stem.string() + ".bin"), both.data(), static_cast<std::size_t>(both.size()));
}

inline LinearClassifier read_classifier(const fs::path& stem) {
  nlohmann::json h = read_json(fs::path(stem.string() + ".json"));
  const auto d = h.at("d").get<Eigen::Index>();
  const auto k = h.at("k").get<Eigen::Index>();
  auto values = read_f64(fs::path(stem.string() + ".bin"), static_cast<std::size_t>(2 * d * k));
  RowMatrix both = Eigen::Map<const RowMatrix>(values.data(), 2 * d, k);
  LinearClassifier clf;
  clf.w = both.topRows(d);
  clf.w0 = both.bottomRows(d);
  clf.objective = objective_from_string(h.at("objective").get<std::string>());
  return clf;
}

// --- CSV -------------------------------------------------------------------

/// trajectory_id, step, t_i, norm, post_injection_norm. Step i carries the
/// norm of x^(i) and of x_hat^(i); the final row (i = N) has t = 0 and no
/// injection.
inline std::string trajectory_csv(const std::vector<TrajectoryRecord>& records, const NoiseSchedule& schedule,
                                  long id_offset = 0) {
  std::ostringstream out;
  out << "trajectory_id,step,t_i,norm,post_injection_norm\n";
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    for (std::size_t i = 0; i < rec.step_norms.size(); ++i) {
      const double t = static_cast<int>(i) < schedule.size() ? schedule.at(static_cast<int>(i)) : 0.0;
      out << (id_offset + static_cast<long>(r)) << ',' << i << ',' << fmt(t) << ',' << fmt(rec.step_norms[i]) << ',';
      if (i < rec.post_injection_norms.size()) out << fmt(rec.post_injection_norms[i]);
      out << '\n';
    }
  }
  return out.str();
}

inline std::string spectrum_csv_header() { return "index,eigenvalue,source,class_id,step\n"; }

inline std::string spectrum_csv_rows(const SpectrumReport& r) {
  std::ostringstream out;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    out << (i + 1) << ',' << fmt(r.eigenvalues[i]) << ',' << to_string(r.source) << ',' << r.class_id << ','
        << r.step << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const PowerLawFit& f) {
  return {{"exponent", f.exponent}, {"log_prefactor", f.log_prefactor}, {"i_lo", f.i_lo},
          {"i_hi", f.i_hi},         {"residual", f.residual}};
}

inline std::string histogram_csv(const std::vector<NormSummary>& summaries) {
  std::ostringstream out;
  out << "class_id,p,bin_lo,bin_hi,count\n";
  for (const auto& s : summaries) {
    for (std::size_t b = 0; b < s.histogram.counts.size(); ++b) {
      out << s.class_id << ',' << fmt(s.p) << ',' << fmt(s.histogram.edges[b]) << ','
          << fmt(s.histogram.edges[b + 1]) << ',' << s.histogram.counts[b] << '\n';
    }
  }
  return out.str();
}

inline std::string training_csv_header() { return "run_id,epoch,train_loss,test_loss,test_accuracy\n"; }

inline std::string training_csv_rows(const std::string& run_id, const std::vector<EpochStats>& curve) {
  std::ostringstream out;
  for (const auto& e : curve) {
    out << run_id << ',' << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.test_loss) << ','
        << fmt(e.test_accuracy) << '\n';
  }
  return out.str();
}

/// Minimal CSV reader for the files this library writes (no quoting).
inline std::vector<std::vector<std::string>> read_csv(const fs::path& path, std::vector<std::string>* header) {
  std::istringstream in(read_text(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (first) {
      if (header) *header = cells;
      first = false;
    } else {
      rows.push_back(std::move(cells));
    }
  }
  return rows;
}

}  // namespace dul::io
