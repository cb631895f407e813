#pragma once

#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace snnadapt {

// One row of streaming adaptation metrics, emitted per batch. Negative
// accuracy/map mean "not applicable" and serialize as null.
struct MetricsRecord {
  int batch = 0;
  int samples = 0;
  double mean_step_loss = 0.0;
  double prediction_entropy = 0.0;
  double accuracy = -1.0;
  double map = -1.0;
  std::vector<double> mean_firing_rates;
  std::vector<double> clip_values;
  std::uint64_t synops = 0;
  std::uint64_t input_macs = 0;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["batch"] = r.batch;
  j["samples"] = r.samples;
  j["mean_step_loss"] = r.mean_step_loss;
  j["prediction_entropy"] = r.prediction_entropy;
  if (r.accuracy >= 0.0) {
    j["accuracy"] = r.accuracy;
  } else {
    j["accuracy"] = nullptr;
  }
  if (r.map >= 0.0) {
    j["map"] = r.map;
  } else {
    j["map"] = nullptr;
  }
  j["mean_firing_rates"] = r.mean_firing_rates;
  j["clip_values"] = r.clip_values;
  j["synops"] = r.synops;
  j["input_macs"] = r.input_macs;
  return j;
}

inline std::string to_json_line(const MetricsRecord& r) { return to_json(r).dump(); }

inline MetricsRecord metrics_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::BadManifest, std::string("bad metrics line: ") + e.what());
  }
  MetricsRecord r;
  r.batch = j.at("batch").get<int>();
  r.samples = j.at("samples").get<int>();
  r.mean_step_loss = j.at("mean_step_loss").get<double>();
  r.prediction_entropy = j.at("prediction_entropy").get<double>();
  r.accuracy = j.at("accuracy").is_null() ? -1.0 : j.at("accuracy").get<double>();
  r.map = j.at("map").is_null() ? -1.0 : j.at("map").get<double>();
  r.mean_firing_rates = j.at("mean_firing_rates").get<std::vector<double>>();
  r.clip_values = j.at("clip_values").get<std::vector<double>>();
  r.synops = j.at("synops").get<std::uint64_t>();
  r.input_macs = j.at("input_macs").get<std::uint64_t>();
  return r;
}

inline std::string csv_header(const MetricsRecord& r) {
  std::ostringstream os;
  os << "batch,samples,mean_step_loss,prediction_entropy,accuracy,map";
  for (std::size_t i = 0; i < r.mean_firing_rates.size(); ++i) os << ",rate_" << i;
  for (std::size_t i = 0; i < r.clip_values.size(); ++i) os << ",clip_" << i;
  os << ",synops,input_macs";
  return os.str();
}

inline std::string to_csv_row(const MetricsRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.batch << ',' << r.samples << ',' << r.mean_step_loss << ',' << r.prediction_entropy
     << ',';
  if (r.accuracy >= 0.0) os << r.accuracy;
  os << ',';
  if (r.map >= 0.0) os << r.map;
  for (double v : r.mean_firing_rates) os << ',' << v;
  for (double v : r.clip_values) os << ',' << v;
  os << ',' << r.synops << ',' << r.input_macs;
  return os.str();
}

enum class MetricsFormat { JsonLines, Csv };

// Streams records to a file or any ostream; emits the CSV header before the
// first row.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& out, MetricsFormat format) : out_(&out), format_(format) {}

  void write(const MetricsRecord& r) {
    if (format_ == MetricsFormat::Csv && !wrote_header_) {
      (*out_) << csv_header(r) << '\n';
      wrote_header_ = true;
    }
    (*out_) << (format_ == MetricsFormat::Csv ? to_csv_row(r) : to_json_line(r)) << '\n';
  }

 private:
  std::ostream* out_;
  MetricsFormat format_;
  bool wrote_header_ = false;
};

}  // namespace snnadapt
