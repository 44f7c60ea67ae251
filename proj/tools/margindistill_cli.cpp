// Copyright 2026 The margindistill Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// margindistill <gen-data|train-teacher|distill|eval|compare> [flags]
//
// Every command also accepts --config FILE: a flat JSON object whose keys are
// flag names without the leading dashes, plus "version": 1. Flags given on
// the command line win over file values.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "margindistill/margindistill.h"

namespace {

using nlohmann::json;

struct CliError {
  md_status status;
  std::string message;
};

void check(md_status status) {
  if (status != MD_OK) throw CliError{status, md_last_error()};
}

[[noreturn]] void config_error(const std::string& message) {
  throw CliError{MD_E_INVALID_CONFIG, message};
}

struct DatasetDeleter {
  void operator()(md_dataset* p) const { md_dataset_free(p); }
};
struct CheckpointDeleter {
  void operator()(md_checkpoint* p) const { md_checkpoint_free(p); }
};
struct ReportDeleter {
  void operator()(md_report* p) const { md_report_free(p); }
};
struct StringDeleter {
  void operator()(char* p) const { md_string_free(p); }
};
using DatasetPtr = std::unique_ptr<md_dataset, DatasetDeleter>;
using CheckpointPtr = std::unique_ptr<md_checkpoint, CheckpointDeleter>;
using ReportPtr = std::unique_ptr<md_report, ReportDeleter>;
using StringPtr = std::unique_ptr<char, StringDeleter>;

DatasetPtr load_dataset(const std::string& path) {
  md_dataset* raw = nullptr;
  check(md_dataset_load(path.c_str(), &raw));
  return DatasetPtr(raw);
}

CheckpointPtr load_checkpoint(const std::string& path) {
  md_checkpoint* raw = nullptr;
  check(md_checkpoint_load(path.c_str(), &raw));
  return CheckpointPtr(raw);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw CliError{MD_E_IO_FAILURE, "cannot write '" + path + "'"};
}

// Binds flags to variables and lets a JSON config file fill the ones that
// were not given on the command line.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "Flat JSON config file");
  }

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + name, var, help)->capture_default_str();
    setters_[name] = [&var, opt, name](const json& value) {
      if (opt->count() > 0) return;
      try {
        var = value.get<T>();
      } catch (const json::exception&) {
        config_error("config key '" + name + "' has the wrong type");
      }
    };
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_flag("--" + name, var, help);
    setters_[name] = [&var, opt, name](const json& value) {
      if (opt->count() > 0) return;
      if (!value.is_boolean()) config_error("config key '" + name + "' must be boolean");
      var = value.get<bool>();
    };
    return opt;
  }

  void apply_config() const {
    if (config_path_.empty()) return;
    std::ifstream in(config_path_, std::ios::binary);
    if (!in) {
      throw CliError{MD_E_IO_FAILURE, "cannot open config '" + config_path_ + "'"};
    }
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      config_error("config '" + config_path_ + "' is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) config_error("config must be a flat JSON object");
    if (!doc.contains("version") || doc["version"] != 1) {
      config_error("config needs \"version\": 1");
    }
    for (const auto& [key, value] : doc.items()) {
      if (key == "version") continue;
      const auto it = setters_.find(key);
      if (it == setters_.end()) config_error("unknown config key '" + key + "'");
      if (value.is_object() || (value.is_array() && !value.empty() &&
                                value.front().is_structured())) {
        config_error("config key '" + key + "' must be a scalar or flat list");
      }
      it->second(value);
    }
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, std::function<void(const json&)>> setters_;
};

// Training flags shared by train-teacher, distill and compare.
struct TrainFlags {
  std::int64_t iterations = 0;
  int batch_size = 0;
  int embedding_dim = 0;
  double lr = 0.0;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<std::int64_t> milestones;
  double decay_factor = 0.0;
  double scale = 0.0;
  double margin = 0.0;
  double m_min = 0.0;
  double m_max = 0.0;
  bool global_a_max = false;
  double temperature = 0.0;
  double kd_hard_weight = 0.0;
  double lambda_angular = 0.0;
  int triplet_per_class = 0;

  TrainFlags() {
    md_train_config d;
    md_train_config_student_default(&d, MD_METHOD_ARCFACE);
    iterations = d.iterations;
    batch_size = d.batch_size;
    embedding_dim = d.embedding_dim;
    lr = d.base_lr;
    momentum = d.momentum;
    weight_decay = d.weight_decay;
    milestones.assign(d.milestones, d.milestones + d.num_milestones);
    decay_factor = d.decay_factor;
    scale = d.s;
    margin = d.m2;
    m_min = d.m_min;
    m_max = d.m_max;
    temperature = d.temperature;
    kd_hard_weight = d.kd_hard_weight;
    lambda_angular = d.lambda_angular;
    triplet_per_class = d.triplet_per_class;
  }

  void bind(Options& o) {
    o.add("iterations", iterations, "Training iterations");
    o.add("batch-size", batch_size, "Mini-batch size");
    o.add("embedding-dim", embedding_dim, "Embedding dimension D");
    o.add("lr", lr, "Base learning rate");
    o.add("momentum", momentum, "SGD momentum");
    o.add("weight-decay", weight_decay, "L2 weight decay");
    o.add("milestones", milestones, "Iterations at which the learning rate drops");
    o.add("decay-factor", decay_factor, "Learning-rate divisor per milestone");
    o.add("scale", scale, "Logit scale s");
    o.add("margin", margin, "Additive angular margin for arcface terms");
    o.add("m-min", m_min, "Smallest distillation margin");
    o.add("m-max", m_max, "Largest distillation margin");
    o.flag("global-a-max", global_a_max,
           "Normalize margins by the training-set maximum teacher cosine");
    o.add("temperature", temperature, "Temperature for temp-kd");
    o.add("kd-hard-weight", kd_hard_weight, "Hard-label weight for temp-kd");
    o.add("lambda-angular", lambda_angular, "Weight of the angular term");
    o.add("triplet-per-class", triplet_per_class, "Samples per class in triplet batches");
  }

  md_train_config to_config(md_method method, const std::vector<int>& hidden,
                            std::uint64_t seed) const {
    md_train_config c;
    md_train_config_student_default(&c, method);
    if (hidden.size() > MD_MAX_HIDDEN) config_error("too many hidden layers");
    if (milestones.size() > MD_MAX_MILESTONES) config_error("too many milestones");
    c.num_hidden = static_cast<int32_t>(hidden.size());
    for (std::size_t k = 0; k < hidden.size(); ++k) c.hidden[k] = hidden[k];
    c.iterations = iterations;
    c.batch_size = batch_size;
    c.seed = seed;
    c.embedding_dim = embedding_dim;
    c.base_lr = lr;
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    c.num_milestones = static_cast<int32_t>(milestones.size());
    for (std::size_t k = 0; k < milestones.size(); ++k) c.milestones[k] = milestones[k];
    c.decay_factor = decay_factor;
    c.s = scale;
    c.m2 = margin;
    c.m_min = m_min;
    c.m_max = m_max;
    c.global_a_max = global_a_max ? 1 : 0;
    c.temperature = temperature;
    c.kd_hard_weight = kd_hard_weight;
    c.lambda_angular = lambda_angular;
    c.triplet_per_class = triplet_per_class;
    return c;
  }
};

struct ProtocolFlags {
  std::int64_t positive_pairs = -1;
  std::int64_t negative_pairs = -1;
  std::int64_t probe_identities = -1;
  std::int64_t distractors = -1;
  std::uint64_t protocol_seed = 0;

  void bind(Options& o) {
    o.add("positive-pairs", positive_pairs, "Positive verification pairs (-1: auto)");
    o.add("negative-pairs", negative_pairs, "Negative verification pairs (-1: auto)");
    o.add("probe-identities", probe_identities, "Identification probes (-1: auto)");
    o.add("distractors", distractors, "Identification distractors (-1: auto)");
    o.add("protocol-seed", protocol_seed, "Seed for protocol construction");
  }

  md_protocol_params to_params() const {
    const auto resolve = [](std::int64_t v, const char* name) -> std::uint64_t {
      if (v == -1) return MD_AUTO;
      if (v < 0) config_error(std::string(name) + " must be >= 0 or -1");
      return static_cast<std::uint64_t>(v);
    };
    md_protocol_params p;
    md_protocol_params_default(&p);
    p.positive_pairs = resolve(positive_pairs, "positive-pairs");
    p.negative_pairs = resolve(negative_pairs, "negative-pairs");
    p.probe_identities = resolve(probe_identities, "probe-identities");
    p.distractors = resolve(distractors, "distractors");
    p.seed = protocol_seed;
    return p;
  }
};

ReportPtr evaluate(const md_checkpoint* ck, const md_dataset* ds,
                   const md_protocol_params& params, const char* label) {
  md_report* raw = nullptr;
  check(md_evaluate(ck, ds, &params, label, &raw));
  return ReportPtr(raw);
}

void print_report(const md_report* report) {
  md_report_values v;
  check(md_report_get(report, &v));
  std::printf("%s: verification %.4f (threshold %.4f), rank-1 %.4f, protocol %s, %.2fs\n",
              v.method, v.verification_accuracy, v.best_threshold, v.rank1_accuracy,
              v.protocol, v.timing_seconds);
}

std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

// ---- commands -------------------------------------------------------------

struct GenDataCmd {
  md_gen_params params{};
  std::string out;

  void setup(CLI::App* app, Options& o) {
    md_gen_params_default(&params);
    o.add("classes", params.classes, "Number of classes");
    o.add("per-class", params.per_class, "Samples per class");
    o.add("dim", params.input_dim, "Input dimension");
    o.add("noise", params.noise_sigma, "Noise norm relative to the class direction");
    o.add("seed", params.seed, "Generation seed");
    o.add("out", out, "Output .mdds path");
    (void)app;
  }

  void run() const {
    if (out.empty()) config_error("--out is required");
    md_dataset* raw = nullptr;
    check(md_dataset_generate(&params, &raw));
    DatasetPtr ds(raw);
    check(md_dataset_save(ds.get(), out.c_str()));
    md_dataset_info info;
    check(md_dataset_get_info(ds.get(), &info));
    std::printf("wrote %s: %llu samples (%llu train, %llu eval), %d classes, dim %d, "
                "noise %g, seed %llu\n",
                out.c_str(), static_cast<unsigned long long>(info.samples),
                static_cast<unsigned long long>(info.train_samples),
                static_cast<unsigned long long>(info.eval_samples), info.classes,
                info.input_dim, info.noise_sigma,
                static_cast<unsigned long long>(info.seed));
  }
};

struct TrainTeacherCmd {
  std::string data;
  std::string out;
  std::string metrics;
  std::uint64_t seed = 1;
  std::vector<int> hidden;
  TrainFlags train;

  void setup(CLI::App*, Options& o) {
    md_train_config d;
    md_train_config_teacher_default(&d);
    hidden.assign(d.hidden, d.hidden + d.num_hidden);
    o.add("data", data, "Dataset .mdds");
    o.add("out", out, "Output teacher .mdck");
    o.add("metrics", metrics, "Per-iteration JSONL metrics file");
    o.add("seed", seed, "Training seed");
    o.add("hidden", hidden, "Hidden layer widths");
    train.bind(o);
  }

  void run() const {
    if (data.empty() || out.empty()) config_error("--data and --out are required");
    md_train_config cfg = train.to_config(MD_METHOD_ARCFACE, hidden, seed);
    DatasetPtr ds = load_dataset(data);
    md_checkpoint* raw = nullptr;
    check(md_train_teacher(ds.get(), &cfg, metrics.empty() ? nullptr : metrics.c_str(),
                           &raw));
    CheckpointPtr ck(raw);
    check(md_checkpoint_save(ck.get(), out.c_str()));
    md_checkpoint_info info;
    check(md_checkpoint_get_info(ck.get(), &info));
    std::printf("wrote teacher %s: %lld iterations, final loss %.6f\n", out.c_str(),
                static_cast<long long>(info.iterations), info.final_loss);
  }
};

struct DistillCmd {
  std::string method = "margin";
  std::string data;
  std::string teacher;
  std::string out;
  std::string metrics;
  std::uint64_t seed = 1;
  std::vector<int> hidden;
  TrainFlags train;

  void setup(CLI::App*, Options& o) {
    md_train_config d;
    md_train_config_student_default(&d, MD_METHOD_MARGIN);
    hidden.assign(d.hidden, d.hidden + d.num_hidden);
    o.add("method", method, "arcface|margin|triplet-l2|triplet-cos|angular|temp-kd");
    o.add("data", data, "Dataset .mdds");
    o.add("teacher", teacher, "Teacher .mdck (not needed for arcface)");
    o.add("out", out, "Output student .mdck");
    o.add("metrics", metrics, "Per-iteration JSONL metrics file");
    o.add("seed", seed, "Training seed");
    o.add("hidden", hidden, "Hidden layer widths");
    train.bind(o);
  }

  void run() const {
    if (data.empty() || out.empty()) config_error("--data and --out are required");
    md_method m;
    check(md_method_from_name(method.c_str(), &m));
    md_train_config cfg = train.to_config(m, hidden, seed);
    DatasetPtr ds = load_dataset(data);
    CheckpointPtr teacher_ck;
    if (!teacher.empty()) teacher_ck = load_checkpoint(teacher);
    md_checkpoint* raw = nullptr;
    check(md_distill(ds.get(), teacher_ck.get(), &cfg,
                     metrics.empty() ? nullptr : metrics.c_str(), &raw));
    CheckpointPtr ck(raw);
    check(md_checkpoint_save(ck.get(), out.c_str()));
    md_checkpoint_info info;
    check(md_checkpoint_get_info(ck.get(), &info));
    std::printf("wrote student %s (%s): %lld iterations, final loss %.6f\n", out.c_str(),
                info.method, static_cast<long long>(info.iterations), info.final_loss);
  }
};

struct EvalCmd {
  std::string checkpoint;
  std::string data;
  std::string out_json;
  std::string out_csv;
  std::string label;
  ProtocolFlags protocol;

  void setup(CLI::App*, Options& o) {
    o.add("checkpoint", checkpoint, "Checkpoint .mdck to evaluate");
    o.add("data", data, "Dataset .mdds");
    o.add("out-json", out_json, "Metrics report (JSON)");
    o.add("out-csv", out_csv, "Metrics report (CSV)");
    o.add("label", label, "Row name (default: teacher or the training method)");
    protocol.bind(o);
  }

  void run() const {
    if (checkpoint.empty() || data.empty()) {
      config_error("--checkpoint and --data are required");
    }
    const md_protocol_params params = protocol.to_params();
    CheckpointPtr ck = load_checkpoint(checkpoint);
    DatasetPtr ds = load_dataset(data);
    ReportPtr report =
        evaluate(ck.get(), ds.get(), params, label.empty() ? nullptr : label.c_str());
    if (!out_json.empty()) check(md_report_save_json(report.get(), out_json.c_str()));
    if (!out_csv.empty()) check(md_report_save_csv(report.get(), out_csv.c_str()));
    print_report(report.get());
  }
};

struct CompareCmd {
  std::string data;
  int seeds = 5;
  std::uint64_t first_seed = 1;
  std::string out;
  std::string summary;
  std::string workdir;
  std::vector<int> teacher_hidden;
  std::vector<int> student_hidden;
  TrainFlags train;
  ProtocolFlags protocol;

  void setup(CLI::App*, Options& o) {
    md_train_config t;
    md_train_config_teacher_default(&t);
    teacher_hidden.assign(t.hidden, t.hidden + t.num_hidden);
    md_train_config s;
    md_train_config_student_default(&s, MD_METHOD_MARGIN);
    student_hidden.assign(s.hidden, s.hidden + s.num_hidden);
    o.add("data", data, "Dataset .mdds");
    o.add("seeds", seeds, "Number of seeds");
    o.add("first-seed", first_seed, "First seed; runs use first-seed .. first-seed+seeds-1");
    o.add("out", out, "Per-seed comparison CSV");
    o.add("summary", summary, "Aggregate CSV (default: <out>.summary.csv)");
    o.add("workdir", workdir, "Directory for per-run checkpoints and JSON reports");
    o.add("teacher-hidden", teacher_hidden, "Teacher hidden widths");
    o.add("student-hidden", student_hidden, "Student hidden widths");
    train.bind(o);
    protocol.bind(o);
  }

  void run() const {
    if (data.empty() || out.empty()) config_error("--data and --out are required");
    if (seeds < 1) config_error("--seeds must be >= 1");
    const md_protocol_params params = protocol.to_params();
    // Validate every configuration before any training starts.
    std::vector<md_train_config> configs;
    for (int k = 0; k < seeds; ++k) {
      const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(k);
      configs.push_back(train.to_config(MD_METHOD_ARCFACE, teacher_hidden, seed));
      for (int m = MD_METHOD_ARCFACE; m <= MD_METHOD_TEMP_KD; ++m) {
        configs.push_back(
            train.to_config(static_cast<md_method>(m), student_hidden, seed));
      }
    }
    if (!workdir.empty()) std::filesystem::create_directories(workdir);
    DatasetPtr ds = load_dataset(data);

    std::string table;
    std::string text;
    std::vector<ReportPtr> all;
    std::size_t next = 0;
    for (int k = 0; k < seeds; ++k) {
      const std::uint64_t seed = first_seed + static_cast<std::uint64_t>(k);
      const std::string tag = "seed" + std::to_string(seed) + "_";
      md_checkpoint* raw = nullptr;
      check(md_train_teacher(ds.get(), &configs[next++], nullptr, &raw));
      CheckpointPtr teacher(raw);
      ReportPtr teacher_report = evaluate(teacher.get(), ds.get(), params, "teacher");
      print_report(teacher_report.get());
      if (!workdir.empty()) {
        check(md_checkpoint_save(teacher.get(),
                                 join_path(workdir, tag + "teacher.mdck").c_str()));
        check(md_report_save_json(teacher_report.get(),
                                  join_path(workdir, tag + "teacher.json").c_str()));
      }
      std::vector<ReportPtr> students;
      for (int m = MD_METHOD_ARCFACE; m <= MD_METHOD_TEMP_KD; ++m) {
        const md_method method = static_cast<md_method>(m);
        md_checkpoint* sraw = nullptr;
        const md_checkpoint* teacher_arg =
            method == MD_METHOD_ARCFACE ? nullptr : teacher.get();
        check(md_distill(ds.get(), teacher_arg, &configs[next++], nullptr, &sraw));
        CheckpointPtr student(sraw);
        ReportPtr report = evaluate(student.get(), ds.get(), params, nullptr);
        print_report(report.get());
        if (!workdir.empty()) {
          const std::string name = tag + md_method_name(method);
          check(md_checkpoint_save(student.get(),
                                   join_path(workdir, name + ".mdck").c_str()));
          check(md_report_save_json(report.get(),
                                    join_path(workdir, name + ".json").c_str()));
        }
        students.push_back(std::move(report));
      }
      std::vector<const md_report*> views;
      for (const auto& r : students) views.push_back(r.get());
      char* csv = nullptr;
      char* pretty = nullptr;
      check(md_gap_report(teacher_report.get(), views.data(), views.size(), k == 0,
                          &csv, &pretty));
      table += StringPtr(csv).get();
      text += StringPtr(pretty).get();
      all.push_back(std::move(teacher_report));
      for (auto& r : students) all.push_back(std::move(r));
    }
    std::vector<const md_report*> views;
    for (const auto& r : all) views.push_back(r.get());
    char* csv = nullptr;
    char* pretty = nullptr;
    check(md_aggregate(views.data(), views.size(), &csv, &pretty));
    const StringPtr agg_csv(csv);
    const StringPtr agg_text(pretty);
    write_text(out, table);
    write_text(summary.empty() ? out + ".summary.csv" : summary, agg_csv.get());
    std::printf("\n%s\n%s", text.c_str(), agg_text.get());
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MarginDistillation: margin-based softmax distillation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(md_version()));

  GenDataCmd gen;
  TrainTeacherCmd teacher;
  DistillCmd distill;
  EvalCmd eval;
  CompareCmd compare;

  struct Entry {
    CLI::App* app;
    std::unique_ptr<Options> options;
    std::function<void()> run;
  };
  std::vector<Entry> entries;
  const auto add = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    auto options = std::make_unique<Options>(sub);
    cmd.setup(sub, *options);
    entries.push_back({sub, std::move(options), [&cmd] { cmd.run(); }});
  };
  add("gen-data", "Generate a synthetic hypersphere-cluster dataset", gen);
  add("train-teacher", "Train a teacher embedder with ArcFace", teacher);
  add("distill", "Train a student with a distillation method", distill);
  add("eval", "Evaluate verification and rank-1 identification", eval);
  add("compare", "Teacher plus all six student methods over several seeds", compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "E_INVALID_CONFIG: %s\n", e.what());
    return 2;
  }

  try {
    for (auto& entry : entries) {
      if (!entry.app->parsed()) continue;
      entry.options->apply_config();
      entry.run();
    }
  } catch (const CliError& e) {
    std::fprintf(stderr, "%s: %s\n", md_status_name(e.status), e.message.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "E_INTERNAL: %s\n", e.what());
    return 1;
  }
  return 0;
}
