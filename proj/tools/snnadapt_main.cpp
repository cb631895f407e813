// Command-line front end for the conversion + test-time adaptation pipeline:
//   synth-data    generate the toy classification / detection corpora
//   train-source  train the source network
//   convert       calibrate ceilings and rewrite it as a spiking network
//   corrupt       synthesize weather corruption over a dataset
//   adapt         stream a dataset through unsupervised adaptation
//   energy        count MACs / spike-triggered accumulates and estimate energy
//
// Every stochastic step derives its draws from --seed, so identical
// invocations produce identical files.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "snnadapt/adapt.hpp"
#include "snnadapt/ann.hpp"
#include "snnadapt/convert.hpp"
#include "snnadapt/corrupt.hpp"
#include "snnadapt/data.hpp"
#include "snnadapt/detect.hpp"
#include "snnadapt/energy.hpp"
#include "snnadapt/io.hpp"
#include "snnadapt/metrics.hpp"
#include "snnadapt/network.hpp"
#include "snnadapt/train.hpp"

namespace {

using snnadapt::Vec;

constexpr int kImageSize = 16;
const snnadapt::DetectionGrid kGrid{4, 4, 2};

snnadapt::CorruptionKind parse_corruption(const std::string& name) {
  if (name == "cloudy") return snnadapt::CorruptionKind::Cloudy;
  if (name == "foggy") return snnadapt::CorruptionKind::Foggy;
  if (name == "none") return snnadapt::CorruptionKind::None;
  throw CLI::ValidationError("--corruption", "expected cloudy, foggy or none");
}

snnadapt::AdaptMode parse_mode(const std::string& name) {
  if (name == "online") return snnadapt::AdaptMode::Online;
  if (name == "bptt") return snnadapt::AdaptMode::BpttOracle;
  if (name == "bn-only") return snnadapt::AdaptMode::BnStatsOnly;
  throw CLI::ValidationError("--mode", "expected online, bptt or bn-only");
}

snnadapt::ParamSubset parse_subset(const std::string& name) {
  if (name == "affine+clip") return snnadapt::ParamSubset::AffineAndClip;
  if (name == "affine") return snnadapt::ParamSubset::Affine;
  if (name == "all") return snnadapt::ParamSubset::All;
  throw CLI::ValidationError("--subset", "expected affine+clip, affine or all");
}

// --config <file> holds a JSON object of option defaults, keyed by the long
// option names without dashes. Explicit flags override it.
nlohmann::json load_config(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      const std::string text = snnadapt::detail::read_file(argv[i + 1]);
      try {
        nlohmann::json j = nlohmann::json::parse(text);
        if (!j.is_object()) throw snnadapt::IoError(snnadapt::IoError::Code::BadManifest,
                                                    "config must be a JSON object");
        return j;
      } catch (const nlohmann::json::exception& e) {
        throw snnadapt::IoError(snnadapt::IoError::Code::BadManifest,
                                std::string("config is not valid JSON: ") + e.what());
      }
    }
  }
  return nlohmann::json::object();
}

template <typename T>
void config_get(const nlohmann::json& cfg, const char* key, T& value) {
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

double batch_accuracy(const Eigen::MatrixXd& preds, const std::vector<int>& labels, int begin) {
  int correct = 0;
  for (Eigen::Index i = 0; i < preds.rows(); ++i) {
    Eigen::Index arg;
    preds.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == labels[static_cast<std::size_t>(begin + i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.rows());
}

struct CommonArgs {
  std::uint64_t seed = 1;
  std::string config_path;
};

int run(int argc, char** argv) {
  CLI::App app{"ANN-to-spiking conversion with streaming test-time adaptation"};
  app.require_subcommand(1);
  app.fallthrough();  // --seed / --config may appear after the subcommand
  const nlohmann::json cfg = load_config(argc, argv);

  CommonArgs common;
  config_get(cfg, "seed", common.seed);
  app.add_option("--config", common.config_path, "JSON file with option defaults");
  app.add_option("--seed", common.seed, "root seed for every random draw");

  // ---- synth-data ----
  auto* synth = app.add_subcommand("synth-data", "generate a toy dataset");
  std::string synth_task = "blobs", synth_out = "data";
  int synth_count = 2000, synth_test = 600;
  config_get(cfg, "task", synth_task);
  config_get(cfg, "count", synth_count);
  config_get(cfg, "test-count", synth_test);
  synth->add_option("--task", synth_task, "blobs or rects");
  synth->add_option("--count", synth_count, "training samples");
  synth->add_option("--test-count", synth_test, "held-out samples");
  synth->add_option("--out", synth_out, "output directory")->required();

  // ---- train-source ----
  auto* train = app.add_subcommand("train-source", "train the source network");
  std::string train_task = "blobs", train_data, train_out = "ann.json";
  int train_epochs = 30, train_batch = 32;
  double train_lr = 0.05;
  config_get(cfg, "task", train_task);
  config_get(cfg, "epochs", train_epochs);
  config_get(cfg, "batch", train_batch);
  config_get(cfg, "lr", train_lr);
  train->add_option("--task", train_task, "blobs or rects");
  train->add_option("--data", train_data, "training dataset manifest")->required();
  train->add_option("--epochs", train_epochs);
  train->add_option("--batch", train_batch);
  train->add_option("--lr", train_lr);
  train->add_option("--out", train_out, "model manifest to write")->required();

  // ---- convert ----
  auto* conv = app.add_subcommand("convert", "rewrite a source model as a spiking network");
  std::string conv_model, conv_data, conv_out = "snn.json";
  double conv_percentile = 99.9;
  int conv_calib = 0;
  config_get(cfg, "percentile", conv_percentile);
  conv->add_option("--model", conv_model, "source model manifest")->required();
  conv->add_option("--data", conv_data, "calibration dataset manifest")->required();
  conv->add_option("--percentile", conv_percentile, "activation ceiling percentile");
  conv->add_option("--calib-count", conv_calib, "use only the first K samples (0 = all)");
  conv->add_option("--out", conv_out, "spiking model manifest to write")->required();

  // ---- corrupt ----
  auto* corr = app.add_subcommand("corrupt", "apply weather corruption to a dataset");
  std::string corr_data, corr_kind = "cloudy", corr_out = "corrupted.json";
  double corr_beta = 0.5, corr_rough = 0.6;
  config_get(cfg, "corruption", corr_kind);
  config_get(cfg, "beta", corr_beta);
  corr->add_option("--data", corr_data, "dataset manifest")->required();
  corr->add_option("--corruption", corr_kind, "cloudy, foggy or none");
  corr->add_option("--beta", corr_beta, "corruption blend weight in [0, 1]");
  corr->add_option("--fog-roughness", corr_rough, "midpoint-displacement roughness");
  corr->add_option("--out", corr_out, "corrupted dataset manifest to write")->required();

  // ---- adapt ----
  auto* adapt = app.add_subcommand("adapt", "stream a dataset through unsupervised adaptation");
  std::string adapt_model, adapt_data, adapt_task = "blobs", adapt_mode = "online";
  std::string adapt_subset = "affine+clip", adapt_metrics, adapt_format = "jsonl", adapt_out;
  int adapt_T = 8, adapt_batch_size = 32, adapt_epochs = 1;
  double adapt_tau = 4.0, adapt_lr = 1e-3, adapt_eps = 1e-3;
  bool adapt_no_refresh = false, adapt_unweighted = false;
  config_get(cfg, "task", adapt_task);
  config_get(cfg, "mode", adapt_mode);
  config_get(cfg, "subset", adapt_subset);
  config_get(cfg, "timesteps", adapt_T);
  config_get(cfg, "batch", adapt_batch_size);
  config_get(cfg, "epochs", adapt_epochs);
  config_get(cfg, "temperature", adapt_tau);
  config_get(cfg, "lr", adapt_lr);
  config_get(cfg, "epsilon", adapt_eps);
  adapt->add_option("--model", adapt_model, "spiking model manifest")->required();
  adapt->add_option("--data", adapt_data, "streaming dataset manifest")->required();
  adapt->add_option("--task", adapt_task, "blobs or rects (selects the objective)");
  adapt->add_option("--mode", adapt_mode, "online, bptt or bn-only");
  adapt->add_option("--subset", adapt_subset, "affine+clip, affine or all");
  adapt->add_option("--timesteps", adapt_T, "simulation steps per sample");
  adapt->add_option("--temperature", adapt_tau, "softmax temperature");
  adapt->add_option("--lr", adapt_lr, "learning rate");
  adapt->add_option("--epsilon", adapt_eps, "L2 pull on the rate ceilings");
  adapt->add_option("--batch", adapt_batch_size, "stream batch size");
  adapt->add_option("--epochs", adapt_epochs, "passes over the stream (ablation only)");
  adapt->add_flag("--no-bn-refresh", adapt_no_refresh, "freeze normalization statistics");
  adapt->add_flag("--unweighted", adapt_unweighted, "disable confidence weighting (rects)");
  adapt->add_option("--metrics", adapt_metrics, "metrics file (default: stdout)");
  adapt->add_option("--metrics-format", adapt_format, "jsonl or csv");
  adapt->add_option("--out", adapt_out, "write the adapted model here");

  // ---- energy ----
  auto* energy = app.add_subcommand("energy", "estimate per-sample inference energy");
  std::string energy_model, energy_data, energy_out;
  int energy_T = 8, energy_count = 0;
  config_get(cfg, "timesteps", energy_T);
  energy->add_option("--model", energy_model, "spiking model manifest")->required();
  energy->add_option("--data", energy_data, "dataset manifest")->required();
  energy->add_option("--timesteps", energy_T);
  energy->add_option("--count", energy_count, "use only the first K samples (0 = all)");
  energy->add_option("--out", energy_out, "report file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    const std::filesystem::path dir(synth_out);
    std::filesystem::create_directories(dir);
    const snnadapt::SplitMix64 root(common.seed);
    snnadapt::Dataset train_ds, test_ds;
    if (synth_task == "blobs") {
      train_ds = snnadapt::make_blob_dataset(synth_count, root.child(1).seed(), kImageSize);
      test_ds = snnadapt::make_blob_dataset(synth_test, root.child(2).seed(), kImageSize);
    } else if (synth_task == "rects") {
      train_ds = snnadapt::make_rect_dataset(synth_count, root.child(1).seed(), kImageSize, kGrid);
      test_ds = snnadapt::make_rect_dataset(synth_test, root.child(2).seed(), kImageSize, kGrid);
    } else {
      throw CLI::ValidationError("--task", "expected blobs or rects");
    }
    snnadapt::save_dataset(train_ds, dir / "train.json");
    snnadapt::save_dataset(test_ds, dir / "test.json");
    std::cout << "wrote " << (dir / "train.json").string() << " (" << train_ds.size()
              << " samples) and " << (dir / "test.json").string() << " (" << test_ds.size()
              << " samples)\n";
    return 0;
  }

  if (train->parsed()) {
    const snnadapt::Dataset ds = snnadapt::load_dataset(train_data);
    snnadapt::TrainConfig tc;
    tc.epochs = train_epochs;
    tc.batch_size = train_batch;
    tc.lr = train_lr;
    tc.seed = common.seed;
    snnadapt::SplitMix64 init_rng = snnadapt::SplitMix64(common.seed).child(0x696e6974);
    if (train_task == "blobs") {
      snnadapt::AnnModel m =
          snnadapt::make_mlp(ds.input_size(), {48, 48}, ds.num_classes, true, init_rng);
      const double loss = snnadapt::train_classifier(m, ds, tc);
      snnadapt::save_model(m, train_out);
      std::cout << "final loss " << loss << ", train accuracy "
                << snnadapt::classifier_accuracy(m, ds) << ", wrote " << train_out << "\n";
    } else if (train_task == "rects") {
      snnadapt::AnnModel m = snnadapt::make_convnet(
          ds.channels, ds.height, ds.width, {{8, 1, 1}, {16, 2, 1}, {16, 2, 1}},
          kGrid.output_size(), true, init_rng);
      const double loss = snnadapt::train_detector(m, ds, kGrid, tc);
      snnadapt::save_model(m, train_out);
      std::cout << "final loss " << loss << ", train mAP "
                << snnadapt::detector_map(m, ds, kGrid) << ", wrote " << train_out << "\n";
    } else {
      throw CLI::ValidationError("--task", "expected blobs or rects");
    }
    return 0;
  }

  if (conv->parsed()) {
    const snnadapt::AnnModel m = snnadapt::load_ann(conv_model);
    const snnadapt::Dataset ds = snnadapt::load_dataset(conv_data);
    std::vector<Vec> calib = ds.images;
    if (conv_calib > 0 && static_cast<std::size_t>(conv_calib) < calib.size()) {
      calib.resize(static_cast<std::size_t>(conv_calib));
    }
    const snnadapt::CalibrationProfile profile =
        snnadapt::calibrate_max_activations(m, calib, conv_percentile);
    const snnadapt::SpikingNetwork net = snnadapt::convert(m, profile);
    snnadapt::save_model(net, conv_out);
    std::cout << "ceilings:";
    for (double a : profile.a_max) std::cout << ' ' << a;
    std::cout << "\nwrote " << conv_out << "\n";
    return 0;
  }

  if (corr->parsed()) {
    const snnadapt::Dataset ds = snnadapt::load_dataset(corr_data);
    const snnadapt::Dataset out = snnadapt::corrupt_dataset(
        ds, parse_corruption(corr_kind), corr_beta, common.seed, corr_rough);
    snnadapt::save_dataset(out, corr_out);
    std::cout << "wrote " << corr_out << " (" << out.size() << " samples)\n";
    return 0;
  }

  if (adapt->parsed()) {
    snnadapt::SpikingNetwork net = snnadapt::load_snn(adapt_model);
    const snnadapt::Dataset ds = snnadapt::load_dataset(adapt_data);

    snnadapt::AdaptConfig ac;
    ac.timesteps = adapt_T;
    ac.temperature = adapt_tau;
    ac.learning_rate = adapt_lr;
    ac.epsilon = adapt_eps;
    ac.mode = parse_mode(adapt_mode);
    ac.subset = parse_subset(adapt_subset);
    ac.refresh_stats = !adapt_no_refresh;
    ac.validate();

    snnadapt::TimestepLossFn loss;
    const bool detection = adapt_task == "rects";
    if (detection) {
      loss = snnadapt::detection_timestep_loss(kGrid, ac.temperature, !adapt_unweighted);
    } else if (adapt_task == "blobs") {
      loss = snnadapt::entropy_timestep_loss(ac.temperature);
    } else {
      throw CLI::ValidationError("--task", "expected blobs or rects");
    }

    std::ofstream metrics_file;
    if (!adapt_metrics.empty()) {
      metrics_file.open(adapt_metrics, std::ios::trunc);
      if (!metrics_file) {
        throw snnadapt::IoError(snnadapt::IoError::Code::WriteFailed,
                                "cannot open " + adapt_metrics);
      }
    }
    snnadapt::MetricsWriter writer(
        adapt_metrics.empty() ? std::cout : metrics_file,
        adapt_format == "csv" ? snnadapt::MetricsFormat::Csv : snnadapt::MetricsFormat::JsonLines);

    const std::uint64_t input_macs_per_sample =
        snnadapt::count_snn_input_macs(net, ac.timesteps);
    int batch_index = 0;
    for (int epoch = 0; epoch < adapt_epochs; ++epoch) {
      for (const auto& [begin, end] :
           snnadapt::batch_ranges(static_cast<int>(ds.size()), adapt_batch_size)) {
        const std::vector<Vec> inputs(ds.images.begin() + begin, ds.images.begin() + end);
        const snnadapt::AdaptBatchResult r = snnadapt::adapt_batch(net, inputs, ac, loss);

        snnadapt::MetricsRecord rec;
        rec.batch = batch_index++;
        rec.samples = end - begin;
        rec.mean_step_loss = r.mean_step_loss;
        // The batch result reports the time-mean of the accumulated output
        // potential, a factor (T+1)/2 above the per-step logit scale. The
        // sigmoid box and confidence decodes need per-step logits, so the
        // detection metrics rescale before splitting the head.
        const double head_scale = 2.0 / (ac.timesteps + 1.0);
        double ent = 0.0;
        for (Eigen::Index i = 0; i < r.predictions.rows(); ++i) {
          ent += detection
                     ? snnadapt::detection_entropy(
                           snnadapt::split_head(
                               kGrid, Vec(r.predictions.row(i).transpose() * head_scale)),
                           ac.temperature, false)
                     : snnadapt::entropy_loss(r.predictions.row(i).transpose(), ac.temperature);
        }
        rec.prediction_entropy = ent / static_cast<double>(r.predictions.rows());
        if (ds.labeled() && !detection) {
          rec.accuracy = batch_accuracy(r.predictions, ds.labels, begin);
        }
        if (detection && !ds.objects.empty()) {
          std::vector<snnadapt::DetectionHeadOutput> preds;
          std::vector<std::vector<snnadapt::GroundTruthBox>> truths;
          for (Eigen::Index i = 0; i < r.predictions.rows(); ++i) {
            preds.push_back(snnadapt::split_head(
                kGrid, Vec(r.predictions.row(i).transpose() * head_scale)));
            truths.push_back(ds.objects[static_cast<std::size_t>(begin + i)]);
          }
          rec.map = snnadapt::evaluate_map(preds, truths);
        }
        for (const Vec& rate : r.mean_firing_rates) rec.mean_firing_rates.push_back(rate.mean());
        for (const snnadapt::LayerSpec& l : net.layers) {
          if (l.kind == snnadapt::LayerKind::Dense || l.kind == snnadapt::LayerKind::Conv2d) {
            rec.clip_values.push_back(l.clip_alpha);
          }
        }
        rec.synops = r.synops;
        rec.input_macs = input_macs_per_sample * static_cast<std::uint64_t>(end - begin);
        writer.write(rec);
      }
    }
    if (!adapt_out.empty()) {
      snnadapt::save_model(net, adapt_out);
      std::cerr << "wrote " << adapt_out << "\n";
    }
    return 0;
  }

  if (energy->parsed()) {
    const snnadapt::SpikingNetwork net = snnadapt::load_snn(energy_model);
    const snnadapt::Dataset ds = snnadapt::load_dataset(energy_data);
    std::size_t n = ds.size();
    if (energy_count > 0) n = std::min(n, static_cast<std::size_t>(energy_count));

    std::uint64_t total_synops = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const snnadapt::RunTrace trace = snnadapt::forward(net, ds.images[i], energy_T);
      total_synops += snnadapt::count_snn_synops(net, trace);
    }
    snnadapt::AnnModel shape_proxy;
    shape_proxy.input_size = net.input_size;
    shape_proxy.layers = net.layers;
    const std::uint64_t ann_macs = snnadapt::count_ann_macs(shape_proxy);
    const std::uint64_t input_macs = snnadapt::count_snn_input_macs(net, energy_T);
    const double mean_synops = static_cast<double>(total_synops) / static_cast<double>(n);

    const snnadapt::EnergyEstimate ann_e = snnadapt::estimate_energy(ann_macs, 0);
    const snnadapt::EnergyEstimate snn_e = snnadapt::estimate_energy(
        input_macs, static_cast<std::uint64_t>(mean_synops + 0.5));

    nlohmann::json report;
    report["samples"] = n;
    report["timesteps"] = energy_T;
    report["ann_macs_per_sample"] = ann_macs;
    report["snn_input_macs_per_sample"] = input_macs;
    report["snn_mean_synops_per_sample"] = mean_synops;
    report["ann_joules_per_sample"] = ann_e.joules;
    report["snn_joules_per_sample"] = snn_e.joules;
    report["energy_ratio_snn_over_ann"] = snn_e.joules / ann_e.joules;
    const std::string text = report.dump(2) + "\n";
    if (energy_out.empty()) {
      std::cout << text;
    } else {
      snnadapt::detail::write_file(energy_out, text);
      std::cout << "wrote " << energy_out << "\n";
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::Error& e) {
    std::cerr << e.get_name() << ": " << e.what() << "\n";
    return e.get_exit_code();
  } catch (const snnadapt::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const snnadapt::StructuralError& e) {
    std::cerr << "structure error: " << e.what() << "\n";
    return 4;
  } catch (const snnadapt::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
