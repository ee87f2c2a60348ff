#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "volseq/data.hpp"
#include "volseq/metrics.hpp"
#include "volseq/model.hpp"
#include "volseq/train.hpp"

namespace volseq {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value file; keys mirror long flag names without the leading dashes.
std::map<std::string, std::string> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path.string() + "'");
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

std::array<std::size_t, 4> parse_per_class(const std::string& text) {
  std::vector<std::size_t> v;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ',')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--per-class takes N or N1,N2,N3,N4, got '" + text + "'");
    }
    v.push_back(std::stoul(part));
  }
  if (v.size() == 1) return {v[0], v[0], v[0], v[0]};
  if (v.size() == 4) return {v[0], v[1], v[2], v[3]};
  throw UsageError("--per-class takes N or N1,N2,N3,N4, got '" + text + "'");
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.filename().string() + suffix);
}

void print_counts(std::ostream& out, const std::array<std::size_t, 4>& before, const std::array<std::size_t, 4>& after) {
  out << "class\tbefore\tafter\n";
  for (int c = 0; c < 4; ++c) out << c + 1 << '\t' << before[c] << '\t' << after[c] << '\n';
}

std::string fmt(double v, const char* f = "%.6f") {
  char b[32];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

std::vector<LoadedSequence> load_manifest_sequences(const fs::path& manifest, const Profile& profile, std::size_t jobs,
                                                    const std::set<std::string>* only = nullptr) {
  const auto m = read_manifest(manifest);
  auto seqs = group_sequences(m);
  if (only) {
    std::vector<ScanSequence> kept;
    for (auto& s : seqs) {
      if (only->count(s.patient_id)) kept.push_back(std::move(s));
    }
    seqs = std::move(kept);
  }
  const auto base = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
  return load_sequences(seqs, base, profile.input, jobs);
}

void write_split(const fs::path& path, const std::vector<LoadedSequence>& data, const SplitIndices& split) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Write, "cannot write split '" + path.string() + "'");
  f << "patient_id\tsubset\n";
  std::vector<std::string> side(data.size());
  for (auto i : split.train) side[i] = "train";
  for (auto i : split.test) side[i] = "test";
  for (std::size_t i = 0; i < data.size(); ++i) f << data[i].patient_id << '\t' << side[i] << '\n';
}

std::set<std::string> read_split(const fs::path& path, const std::string& subset) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Input, "cannot open split '" + path.string() + "'");
  std::set<std::string> out;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    if (line.substr(tab + 1) == subset) out.insert(line.substr(0, tab));
  }
  return out;
}

void write_table(const ParameterTable& t, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Write, "cannot write table '" + path.string() + "'");
  f << "layer\toutput_shape\tparams\n";
  for (const auto& r : t.rows) f << r.type << '\t' << r.output_shape << '\t' << r.params << '\n';
  f << "Total\t\t" << t.total << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Volume-sequence classifier: 3D CNN features fed to recurrent layers.", "volseq"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may also follow the command
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::string config_path;
  std::size_t jobs = 1;
  bool deterministic = true;
  app.add_option("--config", config_path, "key=value file; flags given on the command line win");
  app.add_option("--jobs", jobs, "Worker threads for file I/O")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic,!--no-deterministic", deterministic, "Reproducible runs (default on)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort and manifest");
  std::string synth_out, per_class = "10", shape = "32x32x16", datatype = "f32";
  std::size_t visits = 2;
  std::uint64_t synth_seed = 0;
  bool uncompressed = false;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--per-class", per_class, "Patients per class: N or N1,N2,N3,N4");
  synth->add_option("--visits", visits, "Visits per patient")->check(CLI::PositiveNumber);
  synth->add_option("--shape", shape, "Volume extents D1xD2xD3 (each >= 16)");
  synth->add_option("--seed", synth_seed, "Seed");
  synth->add_option("--datatype", datatype, "u8|i16|f32|f64");
  synth->add_flag("--uncompressed", uncompressed, "Write .nii instead of .nii.gz");

  // augment
  auto* augment = app.add_subcommand("augment", "Balance classes with template and flip augmentation");
  std::string aug_manifest, aug_templates, aug_out;
  std::size_t target = 0;
  std::uint64_t aug_seed = 0;
  augment->add_option("--manifest", aug_manifest, "Input manifest")->required();
  augment->add_option("--templates", aug_templates, "Template transforms (default: the six built-in ones)");
  augment->add_option("--target", target, "Sequences per class after balancing")->required();
  augment->add_option("--seed", aug_seed, "Seed");
  augment->add_option("--out", aug_out, "Output manifest; generated volumes go next to it")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string tr_manifest, tr_arch, tr_profile = "reduced", tr_out, tr_optimizer = "adam", tr_report;
  TrainConfig cfg;
  std::optional<double> tr_dropout;
  double test_fraction = 0.2;
  std::size_t folds = 0;
  train->add_option("--manifest", tr_manifest, "Training manifest")->required();
  train->add_option("--arch", tr_arch, "gru|sgru|sbigru|lstm|slstm|sbilstm")->required();
  train->add_option("--epochs", cfg.epochs, "Epochs")->check(CLI::PositiveNumber);
  train->add_option("--profile", tr_profile, "full|reduced");
  train->add_option("--seed", cfg.seed, "Seed");
  train->add_option("--out", tr_out, "Checkpoint path")->required();
  train->add_option("--batch-size", cfg.batch_size, "Sequences per mini-batch")->check(CLI::PositiveNumber);
  train->add_option("--lr", cfg.learning_rate, "Learning rate");
  train->add_option("--optimizer", tr_optimizer, "adam|sgd");
  train->add_option("--momentum", cfg.momentum, "SGD momentum");
  train->add_option("--dropout", tr_dropout, "Override the head dropout rate");
  train->add_option("--test-fraction", test_fraction, "Held-out share of sequences (0 trains on everything)");
  train->add_option("--folds", folds, "k-fold cross-validation over the training share first (0 = off)");
  train->add_option("--report", tr_report, "Write held-out metrics here");
  train->add_flag("--bn-recalibration,!--no-bn-recalibration", cfg.recalibrate_batchnorm,
                  "Recompute batchnorm statistics over the training volumes after the last epoch (default on)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint and write a metrics report");
  std::string ev_ckpt, ev_manifest, ev_report, ev_split, ev_subset = "test";
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  eval->add_option("--manifest", ev_manifest, "Manifest")->required();
  eval->add_option("--report", ev_report, "Report directory")->required();
  eval->add_option("--split", ev_split, "Split file written by train; restricts evaluation to --subset");
  eval->add_option("--subset", ev_subset, "train|test");

  // predict
  auto* predict = app.add_subcommand("predict", "Class probabilities for one sequence");
  std::string pr_ckpt;
  std::vector<std::string> pr_paths;
  predict->add_option("--checkpoint", pr_ckpt, "Checkpoint")->required();
  predict->add_option("--sequence", pr_paths, "Volumes in visit order")->required()->expected(1, -1);

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Per-layer output shapes and parameter counts");
  std::string in_arch, in_ckpt, in_profile = "full", in_table;
  bool golden = false;
  auto* arch_opt = inspect->add_option("--arch", in_arch, "Architecture id");
  auto* ckpt_opt = inspect->add_option("--checkpoint", in_ckpt, "Checkpoint");
  arch_opt->excludes(ckpt_opt);
  inspect->add_option("--profile", in_profile, "full|reduced (with --arch)");
  inspect->add_flag("--golden", golden, "Diff against the reference tables; nonzero exit on mismatch");
  inspect->add_option("--table-out", in_table, "Also write the table as TSV");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  std::vector<std::string> gc_components{"all"};
  GradCheckOptions gc;
  gradcheck->add_option("--component", gc_components, "Component(s); 'all' for every one");
  gradcheck->add_option("--tolerance", gc.tolerance, "Maximum relative error");
  gradcheck->add_option("--seed", gc.seed, "Seed");
  gradcheck->add_option("--samples", gc.model_samples, "Sampled parameters for the full model");

  // Merge config-file values as extra flags unless the flag was given.
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    std::string cfg_file;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) cfg_file = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) cfg_file = args[i].substr(9);
    }
    if (!cfg_file.empty()) {
      const auto values = read_config(cfg_file);
      std::size_t sub_pos = args.size();
      for (std::size_t i = 0; i < args.size(); ++i) {
        if (app.get_subcommand_no_throw(args[i]) != nullptr) {
          sub_pos = i;
          break;
        }
      }
      CLI::App* sub = sub_pos < args.size() ? app.get_subcommand(args[sub_pos]) : nullptr;
      std::vector<std::string> global_extra, sub_extra;
      for (const auto& [key, value] : values) {
        if (key == "config") throw UsageError("config files cannot include other config files");
        const std::string flag = "--" + key;
        const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
          return a == flag || a.rfind(flag + "=", 0) == 0 || (key == "deterministic" && a == "--no-deterministic");
        });
        if (given) continue;
        if (app.get_option_no_throw(flag) != nullptr) global_extra.push_back(flag + "=" + value);
        else if (sub && sub->get_option_no_throw(flag) != nullptr) sub_extra.push_back(flag + "=" + value);
        else throw UsageError("unknown config key '" + key + "'");
      }
      args.insert(args.begin() + static_cast<long>(sub_pos), global_extra.begin(), global_extra.end());
      args.insert(args.end(), sub_extra.begin(), sub_extra.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::Error& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*synth) {
      SynthConfig sc;
      sc.per_class = parse_per_class(per_class);
      sc.visits = visits;
      sc.shape = parse_extents(shape);
      sc.seed = synth_seed;
      sc.datatype = nifti_type_from_string(datatype);
      sc.compress = !uncompressed;
      const auto m = generate_synthetic_cohort(sc, synth_out, jobs);
      out << "wrote " << m.rows.size() << " volumes (" << group_sequences(m, 1).size() << " sequences) to "
          << synth_out << "\n";
      return 0;
    }

    if (*augment) {
      const fs::path in_path(aug_manifest), out_path(aug_out);
      const auto m = read_manifest(in_path);
      const auto templates = aug_templates.empty() ? builtin_templates() : read_templates(aug_templates);
      const auto before = class_counts(group_sequences(m, 1));
      const fs::path in_dir = in_path.has_parent_path() ? in_path.parent_path() : fs::path(".");
      const fs::path out_dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
      std::error_code ec;
      fs::create_directories(out_dir, ec);
      if (ec) throw Error(ErrorKind::Write, "cannot create '" + out_dir.string() + "'");
      // Original rows are rebased first so every path in the output resolves from out_dir.
      const auto balanced = balance_dataset(rebase_paths(m, in_dir, out_dir), templates.size(), target, aug_seed);
      materialize_augmented(balanced, templates, out_dir, out_dir, jobs);
      write_manifest(balanced, out_path);
      const auto after = class_counts(group_sequences(balanced, 1));
      print_counts(out, before, after);
      std::ofstream counts(sibling(out_path, ".counts.tsv"));
      print_counts(counts, before, after);
      return 0;
    }

    if (*train) {
      const ArchitectureId arch = architecture_from_string(tr_arch);
      cfg.profile = tr_profile;
      cfg.optimizer = optimizer_from_string(tr_optimizer);
      cfg.dropout = tr_dropout;
      cfg.deterministic = deterministic;
      cfg.validate();
      if (!(test_fraction >= 0 && test_fraction < 1)) throw Error(ErrorKind::Config, "--test-fraction must be in [0, 1)");
      const Profile profile = Profile::by_name(tr_profile);
      const auto data = load_manifest_sequences(tr_manifest, profile, jobs);
      std::vector<std::string> warnings;
      SplitIndices split;
      if (test_fraction > 0) {
        split = stratified_split(lineages_of(data), labels_of(data), test_fraction, cfg.seed, &warnings);
      } else {
        for (std::size_t i = 0; i < data.size(); ++i) split.train.push_back(i);
      }
      for (const auto& w : warnings) err << "warning: " << w << '\n';
      const auto train_data = subset(data, split.train);
      const auto test_data = subset(data, split.test);
      out << "sequences: " << train_data.size() << " train, " << test_data.size() << " held out\n";

      const fs::path ckpt(tr_out);
      if (folds > 0) {
        const auto report = kfold_cross_validate(arch, profile, train_data, cfg, folds,
                                                 [&](std::size_t f, const EpochRecord& e) {
                                                   if (e.epoch == cfg.epochs) {
                                                     out << "fold " << f + 1 << " final loss " << fmt(e.loss) << '\n';
                                                   }
                                                 });
        write_fold_report(report, sibling(ckpt, ".folds.tsv"));
        out << "cross-validation (" << folds << " folds): MAAccuracy " << fmt(report.mean.at("ma_accuracy")) << " +- "
            << fmt(report.stddev.at("ma_accuracy")) << ", macro AUC " << fmt(report.mean.at("macro_ovr_auc")) << '\n';
      }

      Model model = Model::build(arch, profile, init_seed(cfg.seed));
      const auto history = train_model(model, train_data, cfg, [&](const EpochRecord& e) {
        out << "epoch " << e.epoch << "/" << cfg.epochs << "  loss " << fmt(e.loss) << "  accuracy "
            << fmt(e.accuracy, "%.4f") << '\n';
        out.flush();
      });
      auto echo = cfg.echo();
      echo["arch"] = tr_arch;
      echo["test_fraction"] = fmt(test_fraction, "%.17g");
      echo["folds"] = std::to_string(folds);
      save_checkpoint(model, ckpt, echo);
      write_history(history, sibling(ckpt, ".history.tsv"));
      write_split(sibling(ckpt, ".split.tsv"), data, split);
      out << "checkpoint written to " << ckpt.string() << '\n';
      if (!test_data.empty()) {
        const auto metrics = evaluate(model, test_data);
        out << "held-out metrics\n" << format_summary(metrics);
        if (!tr_report.empty()) write_report(metrics, tr_report);
      }
      return 0;
    }

    if (*eval) {
      const auto ck = load_checkpoint(ev_ckpt);
      std::optional<std::set<std::string>> only;
      if (!ev_split.empty()) only = read_split(ev_split, ev_subset);
      const auto data = load_manifest_sequences(ev_manifest, ck.model.profile, jobs, only ? &*only : nullptr);
      const auto metrics = evaluate(ck.model, data);
      write_report(metrics, ev_report);
      out << format_summary(metrics);
      return 0;
    }

    if (*predict) {
      const auto ck = load_checkpoint(pr_ckpt);
      std::vector<Tensor> volumes;
      for (const auto& p : pr_paths) volumes.push_back(preprocess_volume(read_nifti(p), ck.model.profile.input));
      const Tensor probs = ck.model.predict(volumes);
      std::size_t best = 0;
      for (std::size_t k = 0; k < probs.size(); ++k) {
        out << "class " << k + 1 << "\t" << fmt(probs[k], "%.6f") << '\n';
        if (probs[k] > probs[best]) best = k;
      }
      out << "predicted class " << best + 1 << '\n';
      return 0;
    }

    if (*inspect) {
      if (in_arch.empty() && in_ckpt.empty()) throw UsageError("inspect needs --arch or --checkpoint");
      Model model;
      if (!in_ckpt.empty()) {
        model = load_checkpoint(in_ckpt).model;
      } else {
        model = Model::build(architecture_from_string(in_arch), Profile::by_name(in_profile), 0);
      }
      const auto table = count_parameters(model);
      out << to_string(model.arch) << " (" << model.profile.name << " profile)\n" << format_table(table);
      if (!in_table.empty()) write_table(table, in_table);
      if (golden) {
        if (!(model.profile == Profile::full())) {
          throw UsageError("the reference tables describe the full profile; got '" + model.profile.name + "'");
        }
        const auto diffs = diff_tables(table, golden_table(model.arch));
        if (!diffs.empty()) {
          for (const auto& d : diffs) err << "mismatch: " << d << '\n';
          return 1;
        }
        out << "matches the reference table (" << table.rows.size() << " rows, total " << table.total << ")\n";
      }
      return 0;
    }

    if (*gradcheck) {
      const auto report = gradient_check(gc_components, gc);
      for (const auto& e : report.entries) {
        char line[160];
        std::snprintf(line, sizeof line, "%-48s %5zu  %.3e  %s\n", e.block.c_str(), e.checked, e.max_relative_error,
                      e.passed ? "ok" : "FAIL");
        out << line;
      }
      out << (report.passed ? "all within tolerance\n" : "tolerance exceeded\n");
      return report.passed ? 0 : 1;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::Divergence ? 1 : 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace volseq
