// Pipeline driver: every stage of the bag-aggregation distillation workflow as
// a subcommand, with flat `key = value` config files, seeded reproducibility,
// and a run manifest written for every invocation.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bingo/bagging.hpp"
#include "bingo/data_io.hpp"
#include "bingo/eval.hpp"
#include "bingo/losses.hpp"
#include "bingo/train.hpp"

namespace {

using namespace bingo;

constexpr int kExitUsage = 2;
constexpr int kExitInvariant = 3;
constexpr int kExitNumeric = 4;

std::string run_dir() {
  const char* env = std::getenv("BINGO_RUN_DIR");
  return env && *env ? env : ".";
}

std::string timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Flat key = value record of one invocation, written on success and failure.
class Manifest {
 public:
  Manifest(const std::string& subcommand, std::string path) : path_(std::move(path)) {
    set("subcommand", subcommand);
    set("start_time", timestamp());
  }

  void set(const std::string& key, const std::string& value) {
    entries_.emplace_back(key, value);
  }
  void set(const std::string& key, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    set(key, std::string(buf));
  }
  void set(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }

  void add_config(const TrainConfig& config) {
    std::istringstream is(config.canonical_text());
    std::string line;
    while (std::getline(is, line)) {
      auto eq = line.find(" = ");
      entries_.emplace_back("config." + line.substr(0, eq), line.substr(eq + 3));
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", config.fingerprint());
    set("config_fingerprint", std::string(buf));
  }

  void finish(int exit_status) {
    set("end_time", timestamp());
    set("exit_status", std::to_string(exit_status));
    std::filesystem::path p(path_);
    if (p.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path_, std::ios::trunc);
    for (const auto& [k, v] : entries_) out << k << " = " << v << "\n";
  }

 private:
  std::string path_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Shared trainer options; the long names double as config-file keys.
struct TrainCli {
  TrainConfig config;
  std::string hidden_dims_text = "128";
  std::string relation_text = "teacher";
  std::string teacher_params_text = "pretrained";
  std::string loss_text = "bingo";
  std::string bag_strategy_text = "knn";

  void attach(CLI::App* cmd, bool distill_mode) {
    cmd->add_option("--epochs", config.epochs, "training epochs")->capture_default_str();
    cmd->add_option("--batch-size", config.batch_size, "anchors per step")
        ->capture_default_str();
    cmd->add_option("--base-lr", config.base_lr, "peak learning rate of the cosine schedule")
        ->capture_default_str();
    cmd->add_option("--sgd-momentum", config.sgd_momentum, "SGD momentum")
        ->capture_default_str();
    cmd->add_option("--weight-decay", config.weight_decay, "L2 weight decay")
        ->capture_default_str();
    cmd->add_option("--tau", config.tau, "softmax temperature")->capture_default_str();
    cmd->add_option("--bank-capacity", config.bank_capacity,
                    "negative-key queue size (multiple of batch size)")
        ->capture_default_str();
    cmd->add_option("--momentum-m", config.momentum_m, "momentum-encoder update coefficient")
        ->capture_default_str();
    cmd->add_option("--seed", config.seed, "run seed")->capture_default_str();
    cmd->add_option("--hidden-dims", hidden_dims_text,
                    "comma-separated backbone widths (empty for none)")
        ->capture_default_str();
    cmd->add_option("--proj-hidden-dim", config.proj_hidden_dim,
                    "projection head hidden width")
        ->capture_default_str();
    cmd->add_option("--embed-dim", config.embed_dim, "embedding dimension")
        ->capture_default_str();
    cmd->add_option("--augment-noise-sigma", config.augment_noise_sigma, "view noise std dev")
        ->capture_default_str();
    cmd->add_option("--augment-mask-prob", config.augment_mask_prob,
                    "per-coordinate mask probability")
        ->capture_default_str();
    cmd->add_option("--augment-scale-lo", config.augment_scale_lo, "view scale lower bound")
        ->capture_default_str();
    cmd->add_option("--augment-scale-hi", config.augment_scale_hi, "view scale upper bound")
        ->capture_default_str();
    cmd->add_option("--log-every", config.log_every, "steps between metric lines")
        ->capture_default_str();
    if (distill_mode) {
      cmd->add_option("--relation", relation_text,
                      "bag relation source: teacher | student-online | none")
          ->capture_default_str();
      cmd->add_option("--teacher-params", teacher_params_text,
                      "teacher weights: pretrained | momentum-of-student")
          ->capture_default_str();
      cmd->add_option("--loss", loss_text, "distillation loss: bingo | kd-l2 | rkd")
          ->capture_default_str();
      cmd->add_option("--lambda-inter", config.lambda_inter,
                      "weight of the inter-sample term")
          ->capture_default_str();
      cmd->add_option("--rebag-period", config.rebag_period_epochs,
                      "epochs between student-online rebaggings")
          ->capture_default_str();
      cmd->add_option("--bag-strategy", bag_strategy_text,
                      "student-online bagging strategy: knn | kmeans | labels")
          ->capture_default_str();
      cmd->add_option("--bag-param", config.bag_param, "K or C for student-online rebagging")
          ->capture_default_str();
      cmd->add_option("--kmeans-max-iters", config.kmeans_max_iters,
                      "Lloyd iteration cap for rebagging")
          ->capture_default_str();
    }
  }

  TrainConfig resolve(TrainMode mode) {
    config.mode = mode;
    config.relation_source = relation_source_from_name(relation_text);
    config.teacher_params_mode = teacher_params_mode_from_name(teacher_params_text);
    config.distill_loss = distill_loss_from_name(loss_text);
    config.bag_strategy = strategy_from_name(bag_strategy_text);
    config.hidden_dims.clear();
    std::stringstream ss(hidden_dims_text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      config.hidden_dims.push_back(std::stoul(item));
    }
    return config;
  }
};

Matrix split_rows(const Dataset& data, const std::string& split) {
  if (split == "all") return data.rows;
  if (split != "train" && split != "val") {
    throw InvariantError("--split must be train, val, or all");
  }
  std::uint8_t tag = split == "val" ? kSplitVal : kSplitTrain;
  return data.subset(data.split_indices(tag)).rows;
}

std::vector<std::int32_t> split_labels(const Dataset& data,
                                       const std::vector<std::int32_t>& labels,
                                       std::uint8_t tag) {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < data.n; ++i) {
    if (data.split[i] == tag) out.push_back(labels[i]);
  }
  return out;
}

void write_report(const EvalReport& report, const std::string& out_path) {
  std::string line = report.to_line();
  std::cout << line << "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    out << line << "\n";
  }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, const std::string& labels_out, std::size_t n,
                 std::size_t dim, std::size_t classes, double class_sep, double noise,
                 std::uint64_t seed, double val_fraction, const std::string& idx_data,
                 const std::string& idx_labels, Manifest& manifest) {
  Dataset data;
  if (!idx_data.empty()) {
    data = load_idx(idx_data);
    if (!idx_labels.empty()) attach_labels(data, load_idx_labels(idx_labels));
    std::size_t val_count =
        static_cast<std::size_t>(std::llround(static_cast<double>(data.n) * val_fraction));
    for (std::size_t i = data.n - val_count; i < data.n; ++i) data.split[i] = kSplitVal;
    manifest.set("input.idx_data", idx_data);
    if (!idx_labels.empty()) manifest.set("input.idx_labels", idx_labels);
  } else {
    data = gen_blobs(n, dim, classes, class_sep, noise, seed, val_fraction);
  }
  save_dataset(data, out);
  manifest.set("output.data", out);
  if (!labels_out.empty()) {
    if (!data.has_labels()) throw InvariantError("gen-data: no labels to write");
    save_labels(data.labels, labels_out);
    manifest.set("output.labels", labels_out);
  }
  std::cout << "wrote " << data.n << " x " << data.input_dim << " dataset to " << out << "\n";
  return 0;
}

int cmd_pretrain(TrainCli& opts, const std::string& data_path, const std::string& out,
                 const std::string& metrics_path, Manifest& manifest) {
  TrainConfig config = opts.resolve(TrainMode::PretrainTeacher);
  manifest.add_config(config);
  manifest.set("input.data", data_path);
  Dataset data = load_dataset(data_path);
  std::ofstream metrics;
  std::ostream* metrics_out = nullptr;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path, std::ios::trunc);
    metrics_out = &metrics;
    manifest.set("output.metrics", metrics_path);
  }
  Checkpoint ckpt = pretrain_teacher(config, data, metrics_out);
  save_checkpoint(ckpt, out);
  manifest.set("output.checkpoint", out);
  std::cout << "pretrained encoder -> " << out << "\n";
  return 0;
}

int cmd_embed(const std::string& ckpt_path, const std::string& data_path,
              const std::string& out, const std::string& split, Manifest& manifest) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Dataset data = load_dataset(data_path);
  Matrix rows = split_rows(data, split);
  Dataset subset;
  subset.n = rows.rows;
  subset.input_dim = rows.cols;
  subset.rows = std::move(rows);
  subset.split.assign(subset.n, kSplitTrain);
  EmbeddingMatrix emb = extract_embeddings(ckpt.params, subset);
  save_embeddings(emb.rows, out);
  manifest.set("input.checkpoint", ckpt_path);
  manifest.set("input.data", data_path);
  manifest.set("split", split);
  manifest.set("output.embeddings", out);
  std::cout << "embedded " << emb.n() << " rows (" << split << " split) -> " << out << "\n";
  return 0;
}

int cmd_bag(const std::string& emb_path, const std::string& strategy, std::size_t k,
            std::size_t clusters, std::size_t max_iters, std::uint64_t seed,
            const std::string& labels_path, const std::string& data_path,
            const std::string& split, const std::string& out, Manifest& manifest) {
  BagStrategy strat = strategy_from_name(strategy);
  BagTable bags;
  if (strat == BagStrategy::Labels) {
    if (labels_path.empty()) {
      throw InvariantError("bag: --strategy labels needs --labels");
    }
    std::vector<std::int32_t> labels = load_labels(labels_path);
    if (!data_path.empty() && split != "all") {
      Dataset data = load_dataset(data_path);
      if (labels.size() != data.n) {
        throw InvariantError("bag: label count does not match dataset");
      }
      labels = split_labels(data, labels, split == "val" ? kSplitVal : kSplitTrain);
    }
    bags = bag_labels(labels);
    manifest.set("input.labels", labels_path);
  } else {
    if (emb_path.empty()) throw InvariantError("bag: --emb is required for " + strategy);
    LoadedEmbeddings emb = load_embeddings(emb_path);
    manifest.set("input.embeddings", emb_path);
    manifest.set("renorm_delta", emb.max_renorm_delta);
    EmbeddingMatrix matrix(std::move(emb.rows));
    if (strat == BagStrategy::Knn) {
      bags = bag_knn(matrix, k);
    } else {
      auto [assign, table] = bag_kmeans(matrix, clusters, max_iters, seed);
      bags = std::move(table);
      manifest.set("kmeans_converged", std::uint64_t(assign.converged ? 1 : 0));
      manifest.set("kmeans_iterations", std::uint64_t(assign.objective_trace.size()));
      manifest.set("kmeans_objective", assign.objective_trace.back());
      manifest.set("kmeans_reseeded", std::uint64_t(assign.reseeded_clusters));
    }
  }
  save_bags(bags, out);
  manifest.set("strategy", strategy);
  manifest.set("param", std::uint64_t(bags.param));
  manifest.set("output.bags", out);
  std::cout << "bagged " << bags.n() << " anchors (" << strategy << ") -> " << out << "\n";
  return 0;
}

int cmd_distill(TrainCli& opts, const std::string& data_path, const std::string& teacher_path,
                const std::string& bags_path, const std::string& out,
                const std::string& metrics_path, Manifest& manifest) {
  TrainConfig config = opts.resolve(TrainMode::Distill);
  manifest.add_config(config);
  manifest.set("input.data", data_path);
  Dataset data = load_dataset(data_path);

  Checkpoint teacher;
  if (config.teacher_params_mode == TeacherParamsMode::Pretrained) {
    if (teacher_path.empty()) throw InvariantError("distill: --teacher is required");
    teacher = load_checkpoint(teacher_path);
    manifest.set("input.teacher", teacher_path);
  }
  BagTable bags;
  const BagTable* bags_ptr = nullptr;
  if (!bags_path.empty()) {
    bags = load_bags(bags_path);
    bags_ptr = &bags;
    manifest.set("input.bags", bags_path);
  }
  std::ofstream metrics;
  std::ostream* metrics_out = nullptr;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path, std::ios::trunc);
    metrics_out = &metrics;
    manifest.set("output.metrics", metrics_path);
  }
  Checkpoint student = distill(config, teacher, bags_ptr, data, metrics_out);
  save_checkpoint(student, out);
  manifest.set("output.checkpoint", out);
  std::cout << "distilled student -> " << out << "\n";
  return 0;
}

struct EvalCli {
  std::string mode = "knn";
  std::string ckpt_path;
  std::string data_path;
  std::string labels_path;
  std::string bags_path;
  std::string out_path;
  std::size_t k = 10;
  double fraction = 0.1;
  std::uint64_t seed = 0;
  ProbeConfig probe;
  FinetuneConfig finetune;
};

int cmd_eval(const EvalCli& opts, Manifest& manifest) {
  Dataset data = load_dataset(opts.data_path);
  manifest.set("input.data", opts.data_path);
  manifest.set("mode", opts.mode);
  Checkpoint ckpt = load_checkpoint(opts.ckpt_path);
  manifest.set("input.checkpoint", opts.ckpt_path);

  if (!opts.labels_path.empty()) {
    attach_labels(data, load_labels(opts.labels_path));
    manifest.set("input.labels", opts.labels_path);
  }
  Dataset train = data.subset(data.split_indices(kSplitTrain));
  Dataset val = data.subset(data.split_indices(kSplitVal));

  EvalReport report;
  report.metric = opts.mode;
  report.seed = opts.seed;
  report.config_fingerprint = ckpt.config_fingerprint;
  report.train_size = train.n;
  report.test_size = val.n;

  if (opts.mode == "knn") {
    EmbeddingMatrix tr = extract_embeddings(ckpt.params, train);
    EmbeddingMatrix va = extract_embeddings(ckpt.params, val);
    report.value = knn_eval(tr.rows, train.labels, va.rows, val.labels, opts.k);
  } else if (opts.mode == "linear") {
    EmbeddingMatrix tr = extract_embeddings(ckpt.params, train);
    EmbeddingMatrix va = extract_embeddings(ckpt.params, val);
    ProbeConfig probe = opts.probe;
    probe.seed = opts.seed;
    report.value = linear_probe(tr.rows, train.labels, va.rows, val.labels, probe);
  } else if (opts.mode == "finetune") {
    FinetuneConfig ft = opts.finetune;
    ft.seed = opts.seed;
    report.value = finetune_fraction(ckpt, data, opts.fraction, ft);
  } else if (opts.mode == "bagdis") {
    if (opts.bags_path.empty()) throw InvariantError("eval: --mode bagdis needs --bags");
    BagTable bags = load_bags(opts.bags_path);
    manifest.set("input.bags", opts.bags_path);
    BagDistanceResult r = bag_distance(ckpt.params, bags, train);
    report.value = r.value;
    manifest.set("skipped_singletons", std::uint64_t(r.skipped_singletons));
  } else if (opts.mode == "intra-class") {
    EmbeddingMatrix va = extract_embeddings(ckpt.params, val);
    report.value = intra_class_distance(va.rows, val.labels);
  } else {
    throw InvariantError("eval: unknown mode '" + opts.mode + "'");
  }
  write_report(report, opts.out_path);
  manifest.set("metric", report.metric);
  manifest.set("value", report.value);
  if (!opts.out_path.empty()) manifest.set("output.report", opts.out_path);
  return 0;
}

struct SweepCli {
  std::string param = "k";
  std::string values_text;
  std::string data_path;
  std::string labels_path;
  std::string teacher_path;
  std::string outdir;
  std::size_t jobs = 1;
  std::size_t eval_k = 10;
};

int run_sweep_value(const SweepCli& sweep, TrainCli train, std::uint32_t value,
                    const std::string& teacher_emb_path) {
  std::filesystem::path dir =
      std::filesystem::path(sweep.outdir) / (sweep.param + "=" + std::to_string(value));
  std::filesystem::create_directories(dir);

  LoadedEmbeddings emb = load_embeddings(teacher_emb_path);
  EmbeddingMatrix matrix(std::move(emb.rows));
  BagTable bags;
  if (sweep.param == "k") {
    bags = bag_knn(matrix, value);
  } else {
    bags = bag_kmeans(matrix, value, train.config.kmeans_max_iters, train.config.seed).second;
  }
  std::string bags_path = (dir / "bags.tsv").string();
  save_bags(bags, bags_path);

  train.bag_strategy_text = sweep.param == "k" ? "knn" : "kmeans";
  TrainConfig config = train.resolve(TrainMode::Distill);
  config.bag_param = value;
  Dataset data = load_dataset(sweep.data_path);
  Checkpoint teacher = load_checkpoint(sweep.teacher_path);
  std::ofstream metrics((dir / "metrics.txt").string(), std::ios::trunc);
  Checkpoint student = distill(config, teacher, &bags, data, &metrics);
  save_checkpoint(student, (dir / "student.ckpt").string());

  attach_labels(data, load_labels(sweep.labels_path));
  Dataset tr = data.subset(data.split_indices(kSplitTrain));
  Dataset va = data.subset(data.split_indices(kSplitVal));
  EvalReport report;
  report.metric = "knn";
  report.value = knn_eval(extract_embeddings(student.params, tr).rows, tr.labels,
                          extract_embeddings(student.params, va).rows, va.labels,
                          sweep.eval_k);
  report.train_size = tr.n;
  report.test_size = va.n;
  report.seed = config.seed;
  report.config_fingerprint = config.fingerprint();
  std::ofstream rep((dir / "report.txt").string(), std::ios::trunc);
  rep << report.to_line() << "\n";
  return 0;
}

int cmd_sweep(const SweepCli& sweep, TrainCli& train, Manifest& manifest) {
  if (sweep.param != "k" && sweep.param != "C") {
    throw InvariantError("sweep: --param must be k or C");
  }
  std::vector<std::uint32_t> values;
  std::stringstream ss(sweep.values_text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(static_cast<std::uint32_t>(std::stoul(item)));
  }
  if (values.empty()) throw InvariantError("sweep: --values is empty");
  std::filesystem::create_directories(sweep.outdir);
  manifest.set("param", sweep.param);
  manifest.set("values", sweep.values_text);
  manifest.set("input.data", sweep.data_path);
  manifest.set("input.teacher", sweep.teacher_path);
  manifest.set("output.dir", sweep.outdir);
  manifest.add_config(train.resolve(TrainMode::Distill));

  // teacher embeddings over the train split, shared by every value
  std::string teacher_emb =
      (std::filesystem::path(sweep.outdir) / "teacher-train.emb").string();
  {
    Checkpoint teacher = load_checkpoint(sweep.teacher_path);
    Dataset data = load_dataset(sweep.data_path);
    Dataset tr = data.subset(data.split_indices(kSplitTrain));
    save_embeddings(extract_embeddings(teacher.params, tr).rows, teacher_emb);
  }

  if (sweep.jobs <= 1) {
    for (std::uint32_t v : values) {
      int rc = run_sweep_value(sweep, train, v, teacher_emb);
      if (rc != 0) return rc;
    }
  } else {
    // opt-in parallelism: one process per value
    std::vector<pid_t> running;
    std::size_t next = 0;
    int failures = 0;
    auto reap = [&running, &failures]() {
      int status = 0;
      pid_t done = waitpid(-1, &status, 0);
      for (auto it = running.begin(); it != running.end(); ++it) {
        if (*it == done) {
          if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
          running.erase(it);
          break;
        }
      }
    };
    while (next < values.size() || !running.empty()) {
      if (next < values.size() && running.size() < sweep.jobs) {
        std::uint32_t v = values[next++];
        pid_t pid = fork();
        if (pid == 0) {
          int rc;
          try {
            rc = run_sweep_value(sweep, train, v, teacher_emb);
          } catch (const NumericError&) {
            rc = kExitNumeric;
          } catch (const std::exception&) {
            rc = kExitInvariant;
          }
          _exit(rc);
        }
        running.push_back(pid);
      } else {
        reap();
      }
    }
    if (failures) {
      throw NumericError("sweep: " + std::to_string(failures) + " runs failed");
    }
  }

  // ordered summary over the per-value reports
  std::ofstream summary((std::filesystem::path(sweep.outdir) / "summary.tsv").string(),
                        std::ios::trunc);
  summary << "param\tvalue\tknn_accuracy\n";
  for (std::uint32_t v : values) {
    std::filesystem::path dir =
        std::filesystem::path(sweep.outdir) / (sweep.param + "=" + std::to_string(v));
    std::ifstream rep((dir / "report.txt").string());
    std::string line;
    if (!std::getline(rep, line)) {
      throw InvariantError("sweep: missing report for value " + std::to_string(v));
    }
    EvalReport report = EvalReport::from_line(line);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", report.value);
    summary << sweep.param << "\t" << v << "\t" << buf << "\n";
    std::cout << sweep.param << "=" << v << " knn=" << report.value << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bag-of-instances distillation pipeline"};
  app.require_subcommand(1);

  std::string manifest_path;
  app.add_option("--manifest", manifest_path,
                 "manifest output path (default <run dir>/manifest-<subcommand>.txt; "
                 "run dir comes from BINGO_RUN_DIR)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize blobs or ingest IDX files");
  std::string gen_out, gen_labels_out, gen_idx_data, gen_idx_labels;
  std::size_t gen_n = 5000, gen_dim = 32, gen_classes = 10;
  double gen_sep = 2.0, gen_noise = 0.5, gen_val_fraction = 0.2;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "dataset output path")->required();
  gen->add_option("--labels-out", gen_labels_out, "labels output path");
  gen->add_option("--n", gen_n, "instance count")->capture_default_str();
  gen->add_option("--dim", gen_dim, "feature dimension")->capture_default_str();
  gen->add_option("--classes", gen_classes, "class count")->capture_default_str();
  gen->add_option("--class-sep", gen_sep, "center scale")->capture_default_str();
  gen->add_option("--noise", gen_noise, "per-coordinate noise std dev")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--val-fraction", gen_val_fraction, "held-out fraction")
      ->capture_default_str();
  gen->add_option("--from-idx-data", gen_idx_data, "ingest an IDX image file instead");
  gen->add_option("--from-idx-labels", gen_idx_labels, "matching IDX label file");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of an encoder");
  TrainCli pre_opts;
  std::string pre_data, pre_out, pre_metrics;
  pre->add_option("--data", pre_data, "dataset path")->required();
  pre->add_option("--out", pre_out, "checkpoint output path")->required();
  pre->add_option("--metrics", pre_metrics, "metrics stream output path");
  pre_opts.attach(pre, false);

  // embed
  auto* emb = app.add_subcommand("embed", "extract unit-norm embeddings");
  std::string emb_ckpt, emb_data, emb_out, emb_split = "train";
  emb->add_option("--ckpt", emb_ckpt, "encoder checkpoint")->required();
  emb->add_option("--data", emb_data, "dataset path")->required();
  emb->add_option("--out", emb_out, "embedding output path")->required();
  emb->add_option("--split", emb_split, "train | val | all")->capture_default_str();

  // bag
  auto* bag = app.add_subcommand("bag", "group instances by embedding similarity");
  std::string bag_emb, bag_strategy = "knn", bag_labels_path, bag_data, bag_split = "train";
  std::string bag_out;
  std::size_t bag_k = 5, bag_clusters = 10, bag_max_iters = 100;
  std::uint64_t bag_seed = 0;
  bag->add_option("--emb", bag_emb, "embedding file (knn/kmeans strategies)");
  bag->add_option("--strategy", bag_strategy, "knn | kmeans | labels")->capture_default_str();
  bag->add_option("--k", bag_k, "neighbors per bag (knn)")->capture_default_str();
  bag->add_option("--clusters", bag_clusters, "cluster count (kmeans)")->capture_default_str();
  bag->add_option("--kmeans-max-iters", bag_max_iters, "Lloyd iteration cap")
      ->capture_default_str();
  bag->add_option("--seed", bag_seed, "kmeans init seed")->capture_default_str();
  bag->add_option("--labels", bag_labels_path, "label file (labels strategy)");
  bag->add_option("--data", bag_data, "dataset path (to align label splits)");
  bag->add_option("--split", bag_split, "train | val | all")->capture_default_str();
  bag->add_option("--out", bag_out, "bag table output path")->required();

  // distill
  auto* dis = app.add_subcommand("distill", "bag-aggregation distillation of a student");
  TrainCli dis_opts;
  std::string dis_data, dis_teacher, dis_bags, dis_out, dis_metrics;
  dis->add_option("--data", dis_data, "dataset path")->required();
  dis->add_option("--teacher", dis_teacher, "teacher checkpoint");
  dis->add_option("--bags", dis_bags, "bag table (relation teacher)");
  dis->add_option("--out", dis_out, "student checkpoint output")->required();
  dis->add_option("--metrics", dis_metrics, "metrics stream output path");
  dis_opts.attach(dis, true);

  // eval
  auto* ev = app.add_subcommand("eval", "representation quality metrics");
  EvalCli ev_opts;
  ev->add_option("--mode", ev_opts.mode, "knn | linear | finetune | bagdis | intra-class")
      ->capture_default_str();
  ev->add_option("--ckpt", ev_opts.ckpt_path, "encoder checkpoint")->required();
  ev->add_option("--data", ev_opts.data_path, "dataset path")->required();
  ev->add_option("--labels", ev_opts.labels_path, "label file");
  ev->add_option("--bags", ev_opts.bags_path, "bag table (bagdis mode)");
  ev->add_option("--out", ev_opts.out_path, "report output path");
  ev->add_option("--k", ev_opts.k, "neighbors for knn mode")->capture_default_str();
  ev->add_option("--fraction", ev_opts.fraction, "label fraction for finetune mode")
      ->capture_default_str();
  ev->add_option("--seed", ev_opts.seed, "evaluation seed")->capture_default_str();
  ev->add_option("--probe-epochs", ev_opts.probe.epochs, "linear probe epochs")
      ->capture_default_str();
  ev->add_option("--probe-lr", ev_opts.probe.lr, "linear probe learning rate")
      ->capture_default_str();
  ev->add_option("--finetune-epochs", ev_opts.finetune.epochs, "finetune epochs")
      ->capture_default_str();
  ev->add_option("--finetune-lr", ev_opts.finetune.lr, "finetune backbone learning rate")
      ->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "bag -> distill -> eval across K or C values");
  SweepCli sw_opts;
  TrainCli sw_train;
  sw->add_option("--param", sw_opts.param, "k | C")->capture_default_str();
  sw->add_option("--values", sw_opts.values_text, "comma-separated parameter values")
      ->required();
  sw->add_option("--data", sw_opts.data_path, "dataset path")->required();
  sw->add_option("--labels", sw_opts.labels_path, "label file for the knn evaluation")
      ->required();
  sw->add_option("--teacher", sw_opts.teacher_path, "teacher checkpoint")->required();
  sw->add_option("--outdir", sw_opts.outdir, "output directory")->required();
  sw->add_option("--jobs", sw_opts.jobs, "parallel runs (process per value)")
      ->capture_default_str();
  sw->add_option("--eval-k", sw_opts.eval_k, "neighbors for the evaluation")
      ->capture_default_str();
  sw_train.attach(sw, true);

  std::string config_path;
  for (CLI::App* sub : app.get_subcommands(nullptr)) {
    sub->add_option("--config", config_path,
                    "flat key = value config file; flags override it");
    for (CLI::Option* opt : sub->get_options()) {
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  // The config file is spliced in as synthetic flags ahead of the real ones,
  // so anything given on the command line wins.
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    for (std::size_t i = 1; i + 1 < args.size() + 1; ++i) {
      if (args[i] != "--config") continue;
      if (i + 1 >= args.size()) break;  // CLI11 reports the missing value
      std::ifstream cfg(args[i + 1]);
      if (!cfg) {
        std::cerr << "error: cannot open config file " << args[i + 1] << "\n";
        return kExitInvariant;
      }
      std::vector<std::string> injected;
      std::string line;
      while (std::getline(cfg, line)) {
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
          std::size_t b = s.find_first_not_of(" \t");
          std::size_t e = s.find_last_not_of(" \t");
          return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) continue;
        injected.push_back("--" + key);
        injected.push_back(value);
      }
      args.insert(args.begin() + 1, injected.begin(), injected.end());
      break;
    }
    std::vector<const char*> argv2;
    argv2.push_back(argv[0]);
    for (const std::string& a : args) argv2.push_back(a.c_str());
    app.parse(static_cast<int>(argv2.size()), argv2.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << (app.get_subcommands().empty() ? app.help()
                                                : app.get_subcommands().front()->help());
    return kExitUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  std::string sub = active->get_name();
  if (manifest_path.empty()) {
    manifest_path = (std::filesystem::path(run_dir()) / ("manifest-" + sub + ".txt")).string();
  }
  Manifest manifest(sub, manifest_path);

  int rc = 0;
  try {
    if (active == gen) {
      manifest.set("seed", gen_seed);
      rc = cmd_gen_data(gen_out, gen_labels_out, gen_n, gen_dim, gen_classes, gen_sep,
                        gen_noise, gen_seed, gen_val_fraction, gen_idx_data, gen_idx_labels,
                        manifest);
    } else if (active == pre) {
      manifest.set("seed", pre_opts.config.seed);
      rc = cmd_pretrain(pre_opts, pre_data, pre_out, pre_metrics, manifest);
    } else if (active == emb) {
      rc = cmd_embed(emb_ckpt, emb_data, emb_out, emb_split, manifest);
    } else if (active == bag) {
      manifest.set("seed", bag_seed);
      rc = cmd_bag(bag_emb, bag_strategy, bag_k, bag_clusters, bag_max_iters, bag_seed,
                   bag_labels_path, bag_data, bag_split, bag_out, manifest);
    } else if (active == dis) {
      manifest.set("seed", dis_opts.config.seed);
      rc = cmd_distill(dis_opts, dis_data, dis_teacher, dis_bags, dis_out, dis_metrics,
                       manifest);
    } else if (active == ev) {
      manifest.set("seed", ev_opts.seed);
      rc = cmd_eval(ev_opts, manifest);
    } else if (active == sw) {
      manifest.set("seed", sw_train.config.seed);
      rc = cmd_sweep(sw_opts, sw_train, manifest);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    rc = kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    rc = kExitInvariant;
  }
  manifest.finish(rc);
  return rc;
}
