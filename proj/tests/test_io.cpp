#include <catch_amalgamated.hpp>

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "snnadapt/convert.hpp"
#include "snnadapt/data.hpp"
#include "snnadapt/io.hpp"
#include "snnadapt/metrics.hpp"
#include "snnadapt/rng.hpp"
#include "snnadapt/train.hpp"
#include "support/builders.hpp"

using namespace snnadapt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("snnadapt_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

IoError::Code code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e.code;
  }
  FAIL("expected an io error");
  return IoError::Code::MissingFile;
}

AnnModel mixed_ann() {
  AnnModel m;
  m.input_size = 16;  // 1 channel, 4x4

  LayerSpec conv;
  conv.kind = LayerKind::Conv2d;
  conv.conv = Conv2dGeom{1, 4, 4, 2, 3, 1, 1};
  SplitMix64 rng(404);
  conv.weights = builders::random_matrix(2, 9, rng, 0.5);
  conv.bias = builders::random_vector(2, rng, 0.1);
  m.layers.push_back(conv);

  LayerSpec norm;
  norm.kind = LayerKind::Normalization;
  norm.norm_channels = 2;
  norm.norm_spatial = 16;
  norm.mu = builders::random_vector(2, rng, 0.3);
  norm.sigma = Vec::Constant(2, 0.9);
  norm.gamma = Vec::Constant(2, 1.1);
  norm.beta = builders::random_vector(2, rng, 0.2);
  m.layers.push_back(norm);

  LayerSpec mid;
  mid.kind = LayerKind::Dense;
  mid.weights = builders::random_matrix(5, 32, rng, 0.3);
  mid.bias = builders::random_vector(5, rng, 0.1);
  m.layers.push_back(mid);

  LayerSpec head;
  head.kind = LayerKind::OutputAccumulator;
  head.weights = builders::random_matrix(3, 5, rng, 0.4);
  head.bias = builders::random_vector(3, rng, 0.1);
  m.layers.push_back(head);

  validate(m);
  return m;
}

}  // namespace

TEST_CASE("float32 blob primitives round-trip") {
  std::string blob;
  detail::put_f32(blob, 1.5);
  detail::put_f32(blob, -0.25);
  detail::put_f32(blob, 0.1);
  REQUIRE(blob.size() == 12);
  REQUIRE(detail::get_f32(blob, 0) == 1.5);
  REQUIRE(detail::get_f32(blob, 1) == -0.25);
  REQUIRE(detail::get_f32(blob, 2) == static_cast<double>(0.1f));
}

TEST_CASE("manifest paths derive the blob name by extension") {
  REQUIRE(detail::blob_path_for("model.json") == fs::path("model.bin"));
  REQUIRE(detail::blob_path_for("/a/b/c.json") == fs::path("/a/b/c.bin"));
}

TEST_CASE("source model save, load and re-save are byte-identical") {
  TempDir dir;
  fs::create_directories(dir.path / "first");
  fs::create_directories(dir.path / "second");
  const AnnModel m = mixed_ann();
  const fs::path a = dir.path / "first" / "model.json";
  const fs::path b = dir.path / "second" / "model.json";
  save_model(m, a);
  REQUIRE(model_kind(a) == "ann");

  const AnnModel loaded = load_ann(a);
  REQUIRE(loaded.input_size == m.input_size);
  REQUIRE(loaded.layers.size() == m.layers.size());
  save_model(loaded, b);

  const std::string ja = detail::read_file(a), jb = detail::read_file(b);
  REQUIRE(ja == jb);
  REQUIRE(detail::read_file(detail::blob_path_for(a)) ==
          detail::read_file(detail::blob_path_for(b)));
}

TEST_CASE("spiking model round trip keeps surrogate settings and behaviour") {
  TempDir dir;
  fs::create_directories(dir.path / "first");
  fs::create_directories(dir.path / "second");
  SplitMix64 rng(405);
  SpikingNetwork net = builders::random_dense_net(rng, 2, 8, 1.0);
  net.surrogate.shape = SurrogateConfig::Shape::Rectangular;
  net.surrogate.width = 0.7;

  const fs::path a = dir.path / "first" / "net.json";
  const fs::path b = dir.path / "second" / "net.json";
  save_model(net, a);
  REQUIRE(model_kind(a) == "snn");

  const SpikingNetwork loaded = load_snn(a);
  REQUIRE(loaded.surrogate.shape == SurrogateConfig::Shape::Rectangular);
  REQUIRE(loaded.surrogate.width == 0.7);
  save_model(loaded, b);
  REQUIRE(detail::read_file(a) == detail::read_file(b));
  REQUIRE(detail::read_file(detail::blob_path_for(a)) ==
          detail::read_file(detail::blob_path_for(b)));

  // The stored network still runs and is deterministic.
  const Vec x = builders::random_input(loaded.input_size, rng);
  const Vec p1 = forward(loaded, x, 6).prediction();
  const Vec p2 = forward(load_snn(a), x, 6).prediction();
  REQUIRE((p1 - p2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loading the wrong model kind is rejected") {
  TempDir dir;
  const fs::path a = dir.path / "a.json";
  save_model(mixed_ann(), a);
  REQUIRE(code_of([&] { load_snn(a); }) == IoError::Code::BadManifest);

  SplitMix64 rng(406);
  const fs::path s = dir.path / "s.json";
  save_model(builders::random_dense_net(rng), s);
  REQUIRE(code_of([&] { load_ann(s); }) == IoError::Code::BadManifest);
}

TEST_CASE("dataset round trip preserves shapes, labels and boxes") {
  TempDir dir;
  fs::create_directories(dir.path / "first");
  fs::create_directories(dir.path / "second");
  const Dataset blobs = make_blob_dataset(6, 9001, 8);
  const fs::path a = dir.path / "first" / "blobs.json";
  const fs::path b = dir.path / "second" / "blobs.json";
  save_dataset(blobs, a);
  const Dataset loaded = load_dataset(a);
  REQUIRE(loaded.size() == blobs.size());
  REQUIRE(loaded.channels == blobs.channels);
  REQUIRE(loaded.height == blobs.height);
  REQUIRE(loaded.width == blobs.width);
  REQUIRE(loaded.num_classes == blobs.num_classes);
  REQUIRE(loaded.labels == blobs.labels);
  save_dataset(loaded, b);
  REQUIRE(detail::read_file(a) == detail::read_file(b));
  REQUIRE(detail::read_file(detail::blob_path_for(a)) ==
          detail::read_file(detail::blob_path_for(b)));

  const Dataset rects = make_rect_dataset(4, 77, 8, DetectionGrid{2, 2, 2});
  const fs::path r = dir.path / "rects.json";
  save_dataset(rects, r);
  const Dataset rloaded = load_dataset(r);
  REQUIRE(rloaded.objects.size() == rects.objects.size());
  for (std::size_t i = 0; i < rects.objects.size(); ++i) {
    REQUIRE(rloaded.objects[i].size() == rects.objects[i].size());
    for (std::size_t k = 0; k < rects.objects[i].size(); ++k) {
      REQUIRE(rloaded.objects[i][k].cls == rects.objects[i][k].cls);
      REQUIRE(rloaded.objects[i][k].cx == rects.objects[i][k].cx);
      REQUIRE(rloaded.objects[i][k].w == rects.objects[i][k].w);
    }
  }
}

TEST_CASE("every io failure reports its specific code") {
  TempDir dir;

  SECTION("missing file") {
    REQUIRE(code_of([&] { load_ann(dir.path / "nope.json"); }) == IoError::Code::MissingFile);
  }

  SECTION("unparseable manifest") {
    detail::write_file(dir.path / "bad.json", "{not json");
    REQUIRE(code_of([&] { load_ann(dir.path / "bad.json"); }) == IoError::Code::BadManifest);
  }

  SECTION("wrong format tag") {
    detail::write_file(dir.path / "tag.json", R"({"format":"something-else","version":1})");
    REQUIRE(code_of([&] { load_ann(dir.path / "tag.json"); }) == IoError::Code::BadManifest);
  }

  SECTION("unsupported version") {
    detail::write_file(dir.path / "v2.json", R"({"format":"snnadapt-model","version":2})");
    REQUIRE(code_of([&] { load_ann(dir.path / "v2.json"); }) ==
            IoError::Code::UnsupportedVersion);
  }

  SECTION("truncated blob") {
    const fs::path a = dir.path / "a.json";
    save_model(mixed_ann(), a);
    const std::string blob = detail::read_file(detail::blob_path_for(a));
    detail::write_file(detail::blob_path_for(a), blob.substr(0, blob.size() / 2));
    REQUIRE(code_of([&] { load_ann(a); }) == IoError::Code::TruncatedBlob);
  }

  SECTION("shape mismatch") {
    const fs::path a = dir.path / "a.json";
    save_model(mixed_ann(), a);
    nlohmann::json j = nlohmann::json::parse(detail::read_file(a));
    j["layers"][2]["out"] = j["layers"][2]["out"].get<int>() + 1;
    detail::write_file(a, j.dump(2) + "\n");
    REQUIRE(code_of([&] { load_ann(a); }) == IoError::Code::ShapeMismatch);
  }

  SECTION("unwritable destination") {
    REQUIRE(code_of([&] { save_model(mixed_ann(), dir.path / "no_dir" / "x.json"); }) ==
            IoError::Code::WriteFailed);
  }
}

TEST_CASE("batch ranges cover the sample count with a short tail") {
  using Ranges = std::vector<std::pair<int, int>>;
  REQUIRE(batch_ranges(10, 4) == Ranges{{0, 4}, {4, 8}, {8, 10}});
  REQUIRE(batch_ranges(3, 10) == Ranges{{0, 3}});
  REQUIRE(batch_ranges(4, 4) == Ranges{{0, 4}});
  REQUIRE(batch_ranges(1, 1) == Ranges{{0, 1}});
  REQUIRE_THROWS_AS(batch_ranges(0, 4), StructuralError);
  REQUIRE_THROWS_AS(batch_ranges(4, 0), StructuralError);
}

TEST_CASE("metrics records survive the json-lines round trip") {
  MetricsRecord r;
  r.batch = 7;
  r.samples = 32;
  r.mean_step_loss = 0.6931471805599453;
  r.prediction_entropy = 1.0986122886681098;
  r.accuracy = 0.8125;
  r.map = -1.0;  // unavailable
  r.mean_firing_rates = {0.25, 0.125};
  r.clip_values = {2.34375, 1.0};
  r.synops = 123456789;
  r.input_macs = 987654321;

  const MetricsRecord back = metrics_from_json_line(to_json_line(r));
  REQUIRE(back.batch == r.batch);
  REQUIRE(back.samples == r.samples);
  REQUIRE(back.mean_step_loss == r.mean_step_loss);
  REQUIRE(back.prediction_entropy == r.prediction_entropy);
  REQUIRE(back.accuracy == r.accuracy);
  REQUIRE(back.map == -1.0);
  REQUIRE(back.mean_firing_rates == r.mean_firing_rates);
  REQUIRE(back.clip_values == r.clip_values);
  REQUIRE(back.synops == r.synops);
  REQUIRE(back.input_macs == r.input_macs);

  REQUIRE(to_json(r).at("map").is_null());
  REQUIRE_THROWS_AS(metrics_from_json_line("{broken"), IoError);
}

TEST_CASE("csv output matches the header column count and writes it once") {
  MetricsRecord r;
  r.mean_firing_rates = {0.5, 0.25, 0.125};
  r.clip_values = {1.0};
  r.accuracy = -1.0;

  const std::string header = csv_header(r);
  const std::string row = to_csv_row(r);
  const auto count_commas = [](const std::string& s) {
    return std::count(s.begin(), s.end(), ',');
  };
  REQUIRE(count_commas(header) == count_commas(row));
  REQUIRE(header.find("rate_2") != std::string::npos);
  REQUIRE(header.find("clip_0") != std::string::npos);

  std::ostringstream os;
  MetricsWriter w(os, MetricsFormat::Csv);
  w.write(r);
  w.write(r);
  const std::string text = os.str();
  REQUIRE(text.find(header) == 0);
  REQUIRE(text.find(header, 1) == std::string::npos);  // header only once

  std::ostringstream js;
  MetricsWriter jw(js, MetricsFormat::JsonLines);
  jw.write(r);
  const MetricsRecord back = metrics_from_json_line(js.str());
  REQUIRE(back.mean_firing_rates == r.mean_firing_rates);
}
