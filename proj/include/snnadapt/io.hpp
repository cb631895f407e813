#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detect.hpp"
#include "errors.hpp"
#include "layers.hpp"
#include "network.hpp"

namespace snnadapt {

// Models and datasets are stored as a JSON manifest next to a raw blob of
// float32 little-endian values. The manifest carries structure and blob
// offsets (in float counts); the blob carries every tensor row-major.
// Numerics are computed in double but stored at float32: a load then save
// reproduces the files byte for byte.

namespace detail {

inline void put_f32(std::string& blob, double v) {
  const auto f = static_cast<float>(v);
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  blob.push_back(static_cast<char>(u & 0xff));
  blob.push_back(static_cast<char>((u >> 8) & 0xff));
  blob.push_back(static_cast<char>((u >> 16) & 0xff));
  blob.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline double get_f32(const std::string& blob, std::size_t float_index) {
  const std::size_t b = float_index * 4;
  std::uint32_t u = static_cast<std::uint8_t>(blob[b]) |
                    (static_cast<std::uint32_t>(static_cast<std::uint8_t>(blob[b + 1])) << 8) |
                    (static_cast<std::uint32_t>(static_cast<std::uint8_t>(blob[b + 2])) << 16) |
                    (static_cast<std::uint32_t>(static_cast<std::uint8_t>(blob[b + 3])) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return static_cast<double>(f);
}

inline nlohmann::json put_matrix(std::string& blob, const Mat& m) {
  const std::size_t offset = blob.size() / 4;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(blob, m(r, c));
  }
  return nlohmann::json{{"offset", offset}, {"count", static_cast<std::size_t>(m.size())}};
}

inline nlohmann::json put_vector(std::string& blob, const Vec& v) {
  const std::size_t offset = blob.size() / 4;
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f32(blob, v(i));
  return nlohmann::json{{"offset", offset}, {"count", static_cast<std::size_t>(v.size())}};
}

inline void check_ref(const nlohmann::json& ref, std::size_t total_floats, std::size_t expected,
                      const std::string& name) {
  if (!ref.is_object() || !ref.contains("offset") || !ref.contains("count")) {
    throw IoError(IoError::Code::BadManifest, "malformed tensor reference for " + name);
  }
  const auto offset = ref.at("offset").get<std::size_t>();
  const auto count = ref.at("count").get<std::size_t>();
  if (count != expected) {
    throw IoError(IoError::Code::ShapeMismatch,
                  name + ": expected " + std::to_string(expected) + " values, manifest declares " +
                      std::to_string(count));
  }
  if (offset + count > total_floats) {
    throw IoError(IoError::Code::TruncatedBlob, name + " extends past the end of the blob");
  }
}

inline Mat get_matrix(const std::string& blob, const nlohmann::json& ref, Eigen::Index rows,
                      Eigen::Index cols, const std::string& name) {
  check_ref(ref, blob.size() / 4, static_cast<std::size_t>(rows * cols), name);
  const auto offset = ref.at("offset").get<std::size_t>();
  Mat m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get_f32(blob, offset + i++);
  }
  return m;
}

inline Vec get_vector(const std::string& blob, const nlohmann::json& ref, Eigen::Index n,
                      const std::string& name) {
  check_ref(ref, blob.size() / 4, static_cast<std::size_t>(n), name);
  const auto offset = ref.at("offset").get<std::size_t>();
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = get_f32(blob, offset + static_cast<std::size_t>(i));
  return v;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoError::Code::WriteFailed, "cannot open " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError(IoError::Code::WriteFailed, "short write to " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoError::Code::MissingFile, "cannot open " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

inline nlohmann::json parse_manifest(const std::string& text, const char* expected_format) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Code::BadManifest, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != expected_format) {
    throw IoError(IoError::Code::BadManifest, "manifest format tag mismatch");
  }
  if (j.value("version", 0) != 1) {
    throw IoError(IoError::Code::UnsupportedVersion,
                  "unsupported manifest version " + std::to_string(j.value("version", 0)));
  }
  return j;
}

inline std::string load_blob(const std::filesystem::path& manifest_path, const nlohmann::json& j) {
  const auto declared = j.at("blob_f32_count").get<std::size_t>();
  const std::filesystem::path blob_file = manifest_path.parent_path() / j.at("blob").get<std::string>();
  std::string blob = read_file(blob_file);
  if (blob.size() != declared * 4) {
    throw IoError(IoError::Code::TruncatedBlob,
                  blob_file.string() + ": expected " + std::to_string(declared * 4) + " bytes, found " +
                      std::to_string(blob.size()));
  }
  return blob;
}

inline nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers, std::string& blob) {
  nlohmann::json arr = nlohmann::json::array();
  for (const LayerSpec& l : layers) {
    nlohmann::json e;
    switch (l.kind) {
      case LayerKind::Dense:
      case LayerKind::OutputAccumulator: {
        e["type"] = l.kind == LayerKind::Dense ? "dense" : "output";
        e["out"] = static_cast<int>(l.weights.rows());
        e["in"] = static_cast<int>(l.weights.cols());
        e["v_th"] = l.v_th;
        e["clip_alpha"] = l.clip_alpha;
        e["alpha_ref"] = l.alpha_ref;
        e["weights"] = put_matrix(blob, l.weights);
        e["bias"] = put_vector(blob, l.bias);
        break;
      }
      case LayerKind::Conv2d: {
        e["type"] = "conv";
        e["geom"] = {{"in_channels", l.conv.in_channels}, {"in_h", l.conv.in_h},
                     {"in_w", l.conv.in_w},               {"out_channels", l.conv.out_channels},
                     {"kernel", l.conv.kernel},           {"stride", l.conv.stride},
                     {"pad", l.conv.pad}};
        e["v_th"] = l.v_th;
        e["clip_alpha"] = l.clip_alpha;
        e["alpha_ref"] = l.alpha_ref;
        e["weights"] = put_matrix(blob, l.weights);
        e["bias"] = put_vector(blob, l.bias);
        break;
      }
      case LayerKind::Normalization: {
        e["type"] = "norm";
        e["channels"] = l.norm_channels;
        e["spatial"] = l.norm_spatial;
        e["mu"] = put_vector(blob, l.mu);
        e["sigma"] = put_vector(blob, l.sigma);
        e["gamma"] = put_vector(blob, l.gamma);
        e["beta"] = put_vector(blob, l.beta);
        break;
      }
    }
    arr.push_back(std::move(e));
  }
  return arr;
}

inline std::vector<LayerSpec> layers_from_json(const nlohmann::json& arr, const std::string& blob) {
  if (!arr.is_array() || arr.empty()) {
    throw IoError(IoError::Code::BadManifest, "manifest has no layers");
  }
  std::vector<LayerSpec> layers;
  int idx = 0;
  for (const nlohmann::json& e : arr) {
    const std::string name = "layer " + std::to_string(idx++);
    const std::string type = e.value("type", "");
    LayerSpec l;
    if (type == "dense" || type == "output") {
      l.kind = type == "dense" ? LayerKind::Dense : LayerKind::OutputAccumulator;
      const auto rows = e.at("out").get<Eigen::Index>();
      const auto cols = e.at("in").get<Eigen::Index>();
      l.v_th = e.at("v_th").get<double>();
      l.clip_alpha = e.at("clip_alpha").get<double>();
      l.alpha_ref = e.at("alpha_ref").get<double>();
      l.weights = get_matrix(blob, e.at("weights"), rows, cols, name + " weights");
      l.bias = get_vector(blob, e.at("bias"), rows, name + " bias");
    } else if (type == "conv") {
      l.kind = LayerKind::Conv2d;
      const nlohmann::json& g = e.at("geom");
      l.conv.in_channels = g.at("in_channels").get<int>();
      l.conv.in_h = g.at("in_h").get<int>();
      l.conv.in_w = g.at("in_w").get<int>();
      l.conv.out_channels = g.at("out_channels").get<int>();
      l.conv.kernel = g.at("kernel").get<int>();
      l.conv.stride = g.at("stride").get<int>();
      l.conv.pad = g.at("pad").get<int>();
      l.v_th = e.at("v_th").get<double>();
      l.clip_alpha = e.at("clip_alpha").get<double>();
      l.alpha_ref = e.at("alpha_ref").get<double>();
      l.weights = get_matrix(blob, e.at("weights"), l.conv.out_channels, l.conv.patch_size(),
                             name + " weights");
      l.bias = get_vector(blob, e.at("bias"), l.conv.out_channels, name + " bias");
    } else if (type == "norm") {
      l.kind = LayerKind::Normalization;
      l.norm_channels = e.at("channels").get<int>();
      l.norm_spatial = e.at("spatial").get<int>();
      l.mu = get_vector(blob, e.at("mu"), l.norm_channels, name + " mu");
      l.sigma = get_vector(blob, e.at("sigma"), l.norm_channels, name + " sigma");
      l.gamma = get_vector(blob, e.at("gamma"), l.norm_channels, name + " gamma");
      l.beta = get_vector(blob, e.at("beta"), l.norm_channels, name + " beta");
    } else {
      throw IoError(IoError::Code::BadManifest, name + ": unknown layer type '" + type + "'");
    }
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Models.
// ---------------------------------------------------------------------------

inline void save_model(const AnnModel& model, const std::filesystem::path& path) {
  validate(model);
  std::string blob;
  nlohmann::json j;
  j["format"] = "snnadapt-model";
  j["version"] = 1;
  j["kind"] = "ann";
  j["input_size"] = model.input_size;
  j["layers"] = detail::layers_to_json(model.layers, blob);
  j["blob"] = detail::blob_path_for(path).filename().string();
  j["blob_f32_count"] = blob.size() / 4;
  detail::write_file(path, j.dump(2) + "\n");
  detail::write_file(detail::blob_path_for(path), blob);
}

inline void save_model(const SpikingNetwork& net, const std::filesystem::path& path) {
  validate(net);
  std::string blob;
  nlohmann::json j;
  j["format"] = "snnadapt-model";
  j["version"] = 1;
  j["kind"] = "snn";
  j["input_size"] = net.input_size;
  j["surrogate"] = {
      {"shape",
       net.surrogate.shape == SurrogateConfig::Shape::Triangular ? "triangular" : "rectangular"},
      {"width", net.surrogate.width}};
  j["layers"] = detail::layers_to_json(net.layers, blob);
  j["blob"] = detail::blob_path_for(path).filename().string();
  j["blob_f32_count"] = blob.size() / 4;
  detail::write_file(path, j.dump(2) + "\n");
  detail::write_file(detail::blob_path_for(path), blob);
}

inline std::string model_kind(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_manifest(detail::read_file(path), "snnadapt-model");
  return j.value("kind", "");
}

inline AnnModel load_ann(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_manifest(detail::read_file(path), "snnadapt-model");
  if (j.value("kind", "") != "ann") {
    throw IoError(IoError::Code::BadManifest, path.string() + " does not hold a source model");
  }
  const std::string blob = detail::load_blob(path, j);
  AnnModel m;
  m.input_size = j.at("input_size").get<int>();
  m.layers = detail::layers_from_json(j.at("layers"), blob);
  validate(m);
  return m;
}

inline SpikingNetwork load_snn(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_manifest(detail::read_file(path), "snnadapt-model");
  if (j.value("kind", "") != "snn") {
    throw IoError(IoError::Code::BadManifest, path.string() + " does not hold a spiking model");
  }
  const std::string blob = detail::load_blob(path, j);
  SpikingNetwork net;
  net.input_size = j.at("input_size").get<int>();
  if (j.contains("surrogate")) {
    const std::string shape = j["surrogate"].value("shape", "triangular");
    net.surrogate.shape = shape == "rectangular" ? SurrogateConfig::Shape::Rectangular
                                                 : SurrogateConfig::Shape::Triangular;
    net.surrogate.width = j["surrogate"].value("width", 0.0);
  }
  net.layers = detail::layers_from_json(j.at("layers"), blob);
  validate(net);
  return net;
}

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

struct Dataset {
  int channels = 1;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<Vec> images;  // channels-first, flattened, values in [0, 1]
  std::vector<int> labels;  // classification targets; empty when unlabeled
  std::vector<std::vector<GroundTruthBox>> objects;  // detection targets

  int input_size() const { return channels * height * width; }
  std::size_t size() const { return images.size(); }
  bool labeled() const { return !labels.empty(); }
};

inline void validate(const Dataset& ds) {
  if (ds.channels < 1 || ds.height < 1 || ds.width < 1) throw StructuralError("bad dataset shape");
  if (ds.images.empty()) throw StructuralError("dataset has no images");
  if (!ds.labels.empty() && ds.labels.size() != ds.images.size()) {
    throw StructuralError("label count does not match image count");
  }
  if (!ds.objects.empty() && ds.objects.size() != ds.images.size()) {
    throw StructuralError("object list count does not match image count");
  }
  for (const Vec& img : ds.images) {
    if (img.size() != ds.input_size()) throw StructuralError("image size mismatch");
  }
  for (int lab : ds.labels) {
    if (lab < 0 || lab >= ds.num_classes) throw StructuralError("label out of range");
  }
  for (const auto& objs : ds.objects) {
    for (const GroundTruthBox& g : objs) {
      if (g.cls < 0 || g.cls >= ds.num_classes) throw StructuralError("object class out of range");
    }
  }
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  validate(ds);
  std::string blob;
  nlohmann::json j;
  j["format"] = "snnadapt-dataset";
  j["version"] = 1;
  j["count"] = ds.images.size();
  j["channels"] = ds.channels;
  j["height"] = ds.height;
  j["width"] = ds.width;
  j["classes"] = ds.num_classes;
  for (const Vec& img : ds.images) {
    for (Eigen::Index i = 0; i < img.size(); ++i) detail::put_f32(blob, img(i));
  }
  if (!ds.labels.empty()) j["labels"] = ds.labels;
  if (!ds.objects.empty()) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& image_objs : ds.objects) {
      nlohmann::json arr = nlohmann::json::array();
      for (const GroundTruthBox& g : image_objs) {
        arr.push_back({{"cls", g.cls}, {"box", {g.cx, g.cy, g.w, g.h}}});
      }
      objs.push_back(std::move(arr));
    }
    j["objects"] = std::move(objs);
  }
  j["blob"] = detail::blob_path_for(path).filename().string();
  j["blob_f32_count"] = blob.size() / 4;
  detail::write_file(path, j.dump(2) + "\n");
  detail::write_file(detail::blob_path_for(path), blob);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_manifest(detail::read_file(path), "snnadapt-dataset");
  const std::string blob = detail::load_blob(path, j);

  Dataset ds;
  ds.channels = j.at("channels").get<int>();
  ds.height = j.at("height").get<int>();
  ds.width = j.at("width").get<int>();
  ds.num_classes = j.at("classes").get<int>();
  const auto count = j.at("count").get<std::size_t>();
  const auto img_size = static_cast<std::size_t>(ds.input_size());
  if (blob.size() != count * img_size * 4) {
    throw IoError(IoError::Code::TruncatedBlob, "dataset blob does not hold count * image floats");
  }
  for (std::size_t n = 0; n < count; ++n) {
    Vec img(static_cast<Eigen::Index>(img_size));
    for (std::size_t i = 0; i < img_size; ++i) {
      img(static_cast<Eigen::Index>(i)) = detail::get_f32(blob, n * img_size + i);
    }
    ds.images.push_back(std::move(img));
  }
  if (j.contains("labels")) ds.labels = j.at("labels").get<std::vector<int>>();
  if (j.contains("objects")) {
    for (const nlohmann::json& image_objs : j.at("objects")) {
      std::vector<GroundTruthBox> objs;
      for (const nlohmann::json& o : image_objs) {
        GroundTruthBox g;
        g.cls = o.at("cls").get<int>();
        const auto& b = o.at("box");
        g.cx = b.at(0).get<double>();
        g.cy = b.at(1).get<double>();
        g.w = b.at(2).get<double>();
        g.h = b.at(3).get<double>();
        objs.push_back(g);
      }
      ds.objects.push_back(std::move(objs));
    }
  }
  try {
    validate(ds);
  } catch (const StructuralError& e) {
    throw IoError(IoError::Code::BadManifest, e.what());
  }
  return ds;
}

// Contiguous [begin, end) batch index ranges covering n samples; the final
// batch keeps the remainder.
inline std::vector<std::pair<int, int>> batch_ranges(int n, int batch_size) {
  if (n < 1 || batch_size < 1) throw StructuralError("batching needs positive sizes");
  std::vector<std::pair<int, int>> out;
  for (int b = 0; b < n; b += batch_size) out.push_back({b, std::min(n, b + batch_size)});
  return out;
}

}  // namespace snnadapt
