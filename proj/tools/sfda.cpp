// sfda: command-line driver for source pretraining, adaptation, evaluation,
// synthetic data generation, standalone mask refinement and ablation runs.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sfda/config.hpp"
#include "sfda/engine.hpp"
#include "sfda/eval.hpp"
#include "sfda/experiment.hpp"
#include "sfda/plot.hpp"

namespace fs = std::filesystem;
using namespace sfda;

namespace {

struct Options {
  std::optional<std::string> config;
  Overrides ov;
  std::optional<std::string> mask;  // refine: soft mask file
  int classes = 5;                  // refine: channels in the soft mask
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  cmd->add_option("--seed", o.ov.seed, "random seed");
  cmd->add_option("--epochs", o.ov.epochs, "training epochs (source epochs for pretrain, total epochs otherwise)");
  cmd->add_option("--stage-t", o.ov.stage_t, "epoch at which circular supervision starts");
  cmd->add_option("--batch", o.ov.batch, "batch size for every network");
  cmd->add_flag("--no-fms", o.ov.no_fms, "drop feature-map statistics matching");
  cmd->add_flag("--no-emin", o.ov.no_emin, "drop entropy minimization");
  cmd->add_flag("--no-sc", o.ov.no_sc, "drop style compensation");
  cmd->add_flag("--with-st", o.ov.with_st, "let the compensation network emit the image directly");
  cmd->add_flag("--no-pamr", o.ov.no_pamr, "drop mask refinement self-training");
  cmd->add_flag("--no-cl", o.ov.no_cl, "drop circular supervision");
  cmd->add_option("--labeled-volume", o.ov.labeled_volume, "labeled target volume for the extension epoch");
  cmd->add_option("--out", o.ov.out, "output directory");
  cmd->add_option("--manifest", o.ov.manifest, "dataset manifest (real data)");
  cmd->add_option("--source-checkpoint", o.ov.source_checkpoint, "source model checkpoint");
  cmd->add_option("--checkpoint", o.ov.checkpoint, "adaptation checkpoint");
  cmd->add_option("--resume", o.ov.resume, "adaptation checkpoint to continue from");
  cmd->add_option("--input", o.ov.input, "input volume");
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

fs::path prepare_out(const RunConfig& c) {
  const fs::path out(c.paths.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
}

/// Echoes the resolved configuration and its digest to the run log.
void log_run(const RunConfig& c, const fs::path& out) {
  Json j{{"command", c.command}, {"seed", c.seed}, {"config_digest", c.digest}, {"started", now_iso()},
         {"config", c.resolved}};
  write_text(out / (c.command + "_run.json"), j.dump(2) + "\n");
  std::cout << "config digest " << c.digest << "  seed " << c.seed << "\n";
}

ExperimentData load_data(const RunConfig& c) {
  if (!c.paths.manifest.empty()) {
    require_input_path(c.paths.manifest, "manifest");
    const fs::path m(c.paths.manifest);
    return prepare_from_manifest(dataio::load_manifest(m), m.parent_path(), c.source_preprocess, c.target_preprocess,
                                 c.train_fraction, c.seed);
  }
  require(c.synthetic, "no manifest given and synthetic data is disabled");
  return prepare_synthetic(c.synthetic_spec, c.seed, c.train_fraction);
}

std::string source_checkpoint_path(const RunConfig& c) {
  return c.paths.source_checkpoint.empty() ? (fs::path(c.paths.out) / "source.ckpt").string()
                                           : c.paths.source_checkpoint;
}

std::unique_ptr<nn::UNet<float>> load_source_net(const RunConfig& c) {
  const auto path = source_checkpoint_path(c);
  require_input_path(path, "source checkpoint");
  auto net = engine::load_source<float>(nn::Archive::load(path));
  require(net->spec() == c.adaptation.network,
          "source checkpoint architecture does not match the configured U1/U2 architecture");
  return net;
}

eval::MetricReport report_for(nn::UNet<float>& net, const std::vector<dataio::LabeledVolume>& vols,
                              const RunConfig& c) {
  std::vector<dataio::LabelMask> preds, gts;
  for (const auto& lv : vols) {
    require(lv.mask.has_value(), "evaluation volumes need labels");
    preds.push_back(engine::infer_volume(net, lv.volume, c.adaptation.batch_size()));
    gts.push_back(*lv.mask);
  }
  auto names = eval::default_class_names();
  names.resize(static_cast<std::size_t>(c.adaptation.network.num_classes - 1), "class");
  for (std::size_t i = 4; i < names.size(); ++i) names[i] = "class" + std::to_string(i + 1);
  auto r = eval::build_report(preds, gts, names);
  r.metadata["config_digest"] = c.digest;
  r.metadata["ablation"] = c.adaptation.ablation.describe();
  return r;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const RunConfig& c) {
  const auto out = prepare_out(c);
  log_run(c, out);
  const auto data = load_data(c);
  std::ofstream log(out / "pretrain_epochs.csv");
  log << "epoch,loss,val_dsc\n";
  const auto* val = data.source_val.empty() ? nullptr : &data.source_val;
  auto result = engine::train_source<float>(data.source_train, c.source, val, [&](int e, double loss, double dsc) {
    log << e << ',' << loss << ',' << dsc << '\n' << std::flush;
    std::cout << "epoch " << e << " loss " << loss << " val_dsc " << dsc << "\n" << std::flush;
  });
  auto archive = engine::source_archive(*result.net);
  archive.put("config_digest", c.digest);
  const auto path = source_checkpoint_path(c);
  archive.save(path);
  std::cout << "source checkpoint written to " << path << "\n";
  return 0;
}

struct AdaptOutcome {
  engine::EpochRecord last;
  eval::MetricReport report;
};

AdaptOutcome run_adaptation(const RunConfig& c, const ExperimentData& data, nn::UNet<float>& source,
                            const fs::path& out, const std::string& tag) {
  engine::Adapter<float> ad(source, c.adaptation);
  if (!c.paths.resume.empty()) {
    require_input_path(c.paths.resume, "resume checkpoint");
    ad.restore(nn::Archive::load(c.paths.resume));
    std::cout << "resuming at epoch " << ad.state().next_epoch << "\n";
  }
  std::optional<dataio::SliceDataset> labeled;
  if (!c.paths.labeled_volume.empty()) {
    require_input_path(c.paths.labeled_volume, "labeled volume");
    auto lv = dataio::load_volume(c.paths.labeled_volume);
    require(lv.mask.has_value(), "labeled volume has no label mask: " + c.paths.labeled_volume);
    auto pre = dataio::preprocess(lv.volume, lv.mask, c.target_preprocess);
    labeled = dataio::make_slice_dataset({pre}, true);
    std::cout << "extension module active with " << labeled->size() << " labeled slices\n";
  }

  const bool fresh = c.paths.resume.empty();
  std::ofstream steps(out / (tag + "_steps.csv"), fresh ? std::ios::trunc : std::ios::app);
  std::ofstream epochs(out / (tag + "_epochs.csv"), fresh ? std::ios::trunc : std::ios::app);
  if (fresh) {
    steps << losses::LossReport::csv_header() << '\n';
    epochs << "epoch,dsc_u1,dsc_u2sc,dsc_u3,mean_loss\n";
  }
  const auto ckpt = c.paths.checkpoint.empty() ? out / (tag + ".ckpt") : fs::path(c.paths.checkpoint);
  ad.hooks().on_step = [&](int e, int s, const losses::LossReport& r) { steps << r.csv_line(e, s) << '\n'; };
  ad.hooks().on_epoch = [&](const engine::EpochRecord& r) {
    epochs << std::setprecision(10) << r.epoch << ',' << r.dsc_u1 << ',' << r.dsc_u2sc << ',' << r.dsc_u3 << ','
           << r.mean_loss << '\n'
           << std::flush;
    steps << std::flush;
    std::cout << tag << " epoch " << r.epoch << " loss " << r.mean_loss;
    if (r.validated()) std::cout << "  dsc U1 " << r.dsc_u1 << " U2oSC " << r.dsc_u2sc << " U3 " << r.dsc_u3;
    std::cout << "\n" << std::flush;
    auto a = ad.to_archive();
    a.put("config_digest", c.digest);
    a.save(ckpt);
  };
  ad.run(data.target_train, data.target_test.empty() ? nullptr : &data.target_test, labeled ? &*labeled : nullptr);

  std::vector<double> xs;
  std::array<std::vector<double>, 3> ys;
  for (const auto& r : ad.state().history) {
    xs.push_back(r.epoch);
    ys[0].push_back(r.dsc_u1);
    ys[1].push_back(r.dsc_u2sc);
    ys[2].push_back(r.dsc_u3);
  }
  plot::line_chart({{xs, ys[0], {31, 119, 180}}, {xs, ys[1], {255, 127, 14}}, {xs, ys[2], {44, 160, 44}}})
      .save_ppm(out / (tag + "_dsc_curves.ppm"));

  AdaptOutcome o;
  o.last = ad.state().history.empty() ? engine::EpochRecord{} : ad.state().history.back();
  if (!data.target_test.empty()) o.report = report_for(*ad.nets().u3, data.target_test, c);
  return o;
}

int cmd_adapt(const RunConfig& c) {
  const auto out = prepare_out(c);
  log_run(c, out);
  auto source = load_source_net(c);
  const auto data = load_data(c);
  const auto o = run_adaptation(c, data, *source, out, "adapt");
  if (!o.report.class_names.empty()) {
    write_text(out / "adapt_report.csv", o.report.to_csv());
    std::cout << o.report.to_table("U3");
  }
  return 0;
}

int cmd_eval(const RunConfig& c) {
  const auto out = prepare_out(c);
  log_run(c, out);
  std::unique_ptr<nn::UNet<float>> net;
  std::string label;
  if (!c.paths.checkpoint.empty()) {
    require_input_path(c.paths.checkpoint, "checkpoint");
    const auto a = nn::Archive::load(c.paths.checkpoint);
    require(a.has("kind") && a.text("kind") == "adaptation", "checkpoint is not an adaptation checkpoint");
    net = std::make_unique<nn::UNet<float>>(c.adaptation.compact_network, 0);
    nn::restore_network(a, "u3", *net);
    label = "U3";
  } else {
    net = load_source_net(c);
    label = "W/o adaptation";
  }
  std::vector<dataio::LabeledVolume> vols;
  if (!c.paths.input.empty()) {
    require_input_path(c.paths.input, "input");
    auto lv = dataio::load_volume(c.paths.input);
    require(lv.mask.has_value(), "input volume has no label mask to evaluate against");
    auto spec = c.target_preprocess;
    spec.strip_background = false;
    vols.push_back(dataio::preprocess(lv.volume, lv.mask, spec));
  } else {
    vols = load_data(c).target_test;
  }
  require(!vols.empty(), "no evaluation volumes");
  const auto r = report_for(*net, vols, c);
  write_text(out / "eval_report.csv", r.to_csv());
  write_text(out / "eval_report.txt", r.to_table(label));
  std::cout << r.to_table(label);
  return 0;
}

int cmd_synth(const RunConfig& c) {
  const auto out = prepare_out(c);
  log_run(c, out);
  const auto pair = dataio::make_synthetic_pair(c.synthetic_spec, c.seed);
  dataio::DatasetManifest source, target;
  auto emit = [&](const std::vector<dataio::LabeledVolume>& vols, const char* prefix, dataio::Modality m,
                  dataio::DatasetManifest& man) {
    for (std::size_t i = 0; i < vols.size(); ++i) {
      std::ostringstream name;
      name << prefix << '_' << std::setw(3) << std::setfill('0') << i << ".sfv";
      dataio::save_volume(out / name.str(), vols[i].volume, vols[i].mask);
      man.entries.push_back({name.str(), name.str(), m, dataio::Split::kTrain, std::nullopt});
    }
  };
  emit(pair.source, "source", dataio::Modality::kSourceLike, source);
  emit(pair.target, "target", dataio::Modality::kTargetLike, target);
  target = dataio::split_dataset(target, c.train_fraction, c.seed);
  for (auto& e : target.entries) source.entries.push_back(e);
  dataio::save_manifest(out / "manifest.txt", source);
  std::cout << "wrote " << pair.source.size() << " source and " << pair.target.size() << " target volumes to "
            << out.string() << "\n";
  return 0;
}

int cmd_refine(const RunConfig& c, const Options& o) {
  const auto out = prepare_out(c);
  log_run(c, out);
  require_input_path(c.paths.input, "input");
  require(o.mask.has_value(), "missing required path: --mask");
  require_input_path(*o.mask, "mask");
  require(o.classes >= 1, "--classes must be positive");
  const auto img = dataio::load_volume(c.paths.input).volume;
  const auto soft = dataio::load_volume(*o.mask).volume;
  const int k = o.classes;
  require(soft.h == img.h && soft.w == img.w && soft.slices == img.slices * k,
          "soft mask must hold " + std::to_string(k) + " class planes per image slice");
  Tensor<double> x(img.slices, 1, img.h, img.w), m(img.slices, k, img.h, img.w);
  for (std::size_t i = 0; i < img.voxels.size(); ++i) x[i] = img.voxels[i];
  for (std::size_t i = 0; i < soft.voxels.size(); ++i) m[i] = soft.voxels[i];
  const auto refined = pamr::refine(m, x, c.adaptation.pamr);
  dataio::Volume rv(soft.slices, soft.h, soft.w);
  rv.spacing = soft.spacing;
  for (std::size_t i = 0; i < rv.voxels.size(); ++i) rv.voxels[i] = static_cast<float>(refined.soft[i]);
  dataio::save_volume(out / "refined_soft.sfv", rv, std::nullopt);
  dataio::LabelMask labels(img.slices, img.h, img.w);
  labels.labels = refined.labels.labels;
  dataio::save_volume(out / "refined_labels.sfv", img, labels);
  std::cout << "refined mask written to " << (out / "refined_soft.sfv").string() << "\n";
  return 0;
}

int cmd_ablate(RunConfig c) {
  const auto out = prepare_out(c);
  log_run(c, out);
  const auto data = load_data(c);
  std::unique_ptr<nn::UNet<float>> source;
  if (!c.paths.source_checkpoint.empty() || fs::exists(source_checkpoint_path(c))) {
    source = load_source_net(c);
  } else {
    std::cout << "no source checkpoint; pretraining one first\n";
    source = engine::train_source<float>(data.source_train, c.source).net;
    engine::source_archive(*source).save(source_checkpoint_path(c));
  }
  std::vector<engine::AblationSetting> rows{{"Proposed", c.adaptation.ablation}};
  for (const auto& s : engine::ablation_settings()) rows.push_back(s);
  std::ostringstream csv, table;
  csv << std::setprecision(10) << "setting,flags,dsc_u1,dsc_u2sc,dsc_u3";
  table << std::left << std::setw(12) << "Setting" << std::setw(10) << "U1" << std::setw(10) << "U2oSC"
        << std::setw(10) << "U3";
  const auto names = eval::default_class_names();
  for (const auto& n : names) csv << ",dsc_" << n;
  csv << ",dsc_mean,assd_mean\n";
  table << "ASSD\n";
  for (const auto& row : rows) {
    auto rc = c;
    rc.adaptation.ablation = row.flags;
    rc.paths.resume.clear();
    rc.paths.checkpoint.clear();
    std::string tag = "ablate_" + row.name;
    for (auto& ch : tag)
      if (ch == '/' || ch == ' ') ch = '_';
    const auto o = run_adaptation(rc, data, *source, out, tag);
    csv << '"' << row.name << "\"," << row.flags.describe() << ',' << o.last.dsc_u1 << ',' << o.last.dsc_u2sc << ','
        << o.last.dsc_u3;
    for (double v : o.report.class_dsc) csv << ',' << v;
    csv << ',' << o.report.mean_dsc << ',' << o.report.mean_assd << '\n';
    table << std::setw(12) << row.name << std::fixed << std::setprecision(3) << std::setw(10) << o.last.dsc_u1
          << std::setw(10) << o.last.dsc_u2sc << std::setw(10) << o.last.dsc_u3 << o.report.mean_assd << '\n';
  }
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.txt", table.str());
  std::cout << table.str();
  return 0;
}

const char* code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kValidation: return "validation";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kSchedule: return "schedule";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free cross-modality segmentation adaptation"};
  app.require_subcommand(1);
  Options o;
  struct Sub {
    const char* name;
    const char* help;
  };
  const std::vector<Sub> subs{{"pretrain", "train the source segmentation model"},
                              {"adapt", "adapt the source model to unlabeled target data"},
                              {"eval", "evaluate a checkpoint on labeled target volumes"},
                              {"synth", "generate a synthetic source/target dataset"},
                              {"refine", "refine a soft mask with pixel-adaptive refinement"},
                              {"ablate", "run the default setting and every ablation"}};
  std::map<std::string, CLI::App*> cmds;
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, o);
    cmds[s.name] = cmd;
  }
  cmds["refine"]->add_option("--mask", o.mask, "soft mask with one plane per class and slice");
  cmds["refine"]->add_option("--classes", o.classes, "number of classes in the soft mask");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command;
  for (const auto& [name, cmd] : cmds)
    if (cmd->parsed()) command = name;

  try {
    const auto cfg = parse_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt, o.ov, command);
    if (command == "pretrain") return cmd_pretrain(cfg);
    if (command == "adapt") return cmd_adapt(cfg);
    if (command == "eval") return cmd_eval(cfg);
    if (command == "synth") return cmd_synth(cfg);
    if (command == "refine") return cmd_refine(cfg, o);
    if (command == "ablate") return cmd_ablate(cfg);
  } catch (const Error& e) {
    std::cerr << "error[" << code_name(e.code()) << "]: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
