#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cnf/checkpoint.hpp"
#include "cnf/config.hpp"
#include "cnf/fabric.hpp"
#include "cnf/noise.hpp"
#include "cnf/pruning.hpp"
#include "cnf/runner.hpp"

namespace {

using cnf::ExperimentConfig;
using cnf::FabricDims;

struct DimsArgs {
  std::string preset;
  int layers = 8;
  int channels = 64;
  int resolution = 32;
  int classes = 10;

  void add(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "cifar10, cifar100, voc or svhn")
        ->check(CLI::IsMember({"cifar10", "cifar100", "voc", "svhn"}));
    cmd->add_option("--layers", layers, "fabric layers");
    cmd->add_option("--channels", channels, "channels per node");
    cmd->add_option("--resolution", resolution, "input resolution (power of two)");
    cmd->add_option("--classes", classes, "number of classes");
  }

  FabricDims dims() const {
    if (preset == "cifar10") return FabricDims::from_resolution(8, 64, 32, 10);
    if (preset == "cifar100") return FabricDims::from_resolution(8, 64, 32, 100);
    if (preset == "voc") return FabricDims::from_resolution(8, 64, 64, 20);
    if (preset == "svhn") return FabricDims::from_resolution(8, 32, 32, 10);
    return FabricDims::from_resolution(layers, channels, resolution, classes);
  }
};

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> sparsity;
  std::optional<std::string> strategy;
  std::optional<std::string> criterion;
  std::optional<std::string> noise;
  std::optional<double> noise_rate;
  std::optional<std::string> out;

  void add(CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--epochs", epochs, "total epochs; milestones and prune epochs are rescaled");
    cmd->add_option("--sparsity", sparsity, "fraction of prunable elements kept; enables pruning");
    cmd->add_option("--strategy", strategy, "prune schedule")->check(CLI::IsMember({"early", "iterative", "late"}));
    cmd->add_option("--criterion", criterion, "prune criterion")->check(CLI::IsMember({"magnitude", "sensitivity"}));
    cmd->add_option("--noise", noise, "label noise")->check(CLI::IsMember({"none", "uniform", "class", "annotator"}));
    cmd->add_option("--noise-rate", noise_rate, "flip probability or annotator target error");
    if (with_out) cmd->add_option("--out", out, "output directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : cnf::load_config(config);
    if (seed) c.seed = *seed;
    if (sparsity) {
      c.prune.enabled = true;
      c.prune.sparsity = *sparsity;
    }
    if (strategy) {
      c.prune.strategy = cnf::parse_strategy(*strategy);
      c.prune.epochs.clear();
    }
    if (criterion) c.prune.criterion = cnf::parse_criterion(*criterion);
    if (noise) c.noise.type = *noise;
    if (noise_rate) c.noise.rate = *noise_rate;
    if (out) c.out = *out;
    if (epochs) c = cnf::scale_schedule(c, *epochs);
    c.validate();
    return c;
  }
};

int cmd_train(const RunArgs& args) {
  const ExperimentConfig cfg = args.resolve();
  cnf::RunHooks hooks;
  hooks.on_epoch = [](const cnf::EpochRecord& r) {
    std::printf("epoch %3d  lr %.4g  loss %.4f  val %.4f  test %.4f  links %zu  params %zu\n", r.epoch,
                r.learning_rate, r.train_loss, r.val_error, r.test_error, r.alive_links, r.live_params);
    std::fflush(stdout);
  };
  hooks.on_prune = [](const cnf::PruneReport& r) {
    std::printf("prune @%d  killed %zu  cascade %zu  masked %zu  alive links %zu\n", r.event.epoch,
                r.killed_links.size(), r.cascade_links.size(), r.masked_weights, r.alive_links);
  };
  hooks.on_warning = [](const std::string& w) { std::fprintf(stderr, "warning: %s\n", w.c_str()); };
  const auto res = cnf::run_experiment<float>(cfg, hooks);
  std::printf("config %s  final test error %.4f  -> %s\n", res.config_hash.c_str(), res.final_test_error,
              cfg.out.c_str());
  if (res.fitting) {
    const auto& f = *res.fitting;
    std::printf("clean fitting %s  noisy fitting %s\n",
                f.clean_fitting ? std::to_string(*f.clean_fitting).c_str() : "n/a",
                f.noisy_fitting ? std::to_string(*f.noisy_fitting).c_str() : "n/a");
  }
  return 0;
}

int cmd_prune_plan(const DimsArgs& d, double sparsity, const std::string& strategy, std::optional<int> epochs,
                   bool pre_link) {
  const FabricDims dims = d.dims();
  dims.validate();
  auto fabric = cnf::Fabric<float>::build(dims, 0);
  cnf::PlanOptions po;
  po.weight_base = pre_link ? cnf::WeightBase::PreLinkPruning : cnf::WeightBase::PostLinkPruning;
  const auto strat = cnf::parse_strategy(strategy);
  if (epochs) {
    std::vector<int> ev = cnf::default_prune_epochs(strat);
    for (int& e : ev) e = cnf::rescale_epoch(e, 200, *epochs);
    po.epochs = ev;
  }
  const auto plan = cnf::build_plan(strat, sparsity, fabric, po);
  const auto& b = plan.budget;
  std::printf("strategy %s  sparsity %g\n", strategy.c_str(), sparsity);
  std::printf("links %zu  longest_path %zu  links_kept %zu\n", b.total_links, b.min_links_kept, b.links_kept);
  std::printf("conv_weights %zu  weights_kept %zu\n", b.total_conv_weights, b.weights_kept);
  for (const auto& e : plan.events)
    std::printf("event epoch %d  links %zu  weights %zu\n", e.epoch, e.links_to_remove, e.weights_to_remove);
  for (const auto& w : plan.warnings) std::printf("warning %s\n", w.c_str());
  std::printf("baseline_params %zu\n", cnf::param_count(dims).total);
  std::printf("reported_params %zu\n", cnf::reported_param_count(dims, sparsity));
  return 0;
}

int cmd_count_params(const DimsArgs& d, std::optional<double> sparsity) {
  const FabricDims dims = d.dims();
  dims.validate();
  const auto b = cnf::param_count(dims);
  std::printf("layers %d  scales %d  channels %d  resolution %d  classes %d\n", dims.layers, dims.scales,
              dims.channels, dims.resolution, dims.classes);
  std::printf("links %zu\n", dims.link_count());
  std::printf("stem %zu\nlinks_params %zu\nhead %zu\ntotal %zu\n", b.stem_params, b.link_params, b.head_params,
              b.total);
  if (sparsity) std::printf("reported_params %zu\n", cnf::reported_param_count(dims, *sparsity));
  return 0;
}

int cmd_export_dot(const std::string& checkpoint, const DimsArgs& d, const std::string& out, bool show_pruned) {
  const auto fabric =
      checkpoint.empty() ? cnf::Fabric<float>::build(d.dims(), 0) : cnf::load_checkpoint<float>(checkpoint);
  const std::string dot = cnf::export_dot(fabric, cnf::DotOptions{show_pruned});
  if (out.empty()) {
    std::cout << dot;
  } else {
    cnf::detail::write_text(out, dot);
  }
  return 0;
}

int cmd_inject_noise(const RunArgs& args, const std::string& out) {
  const ExperimentConfig cfg = args.resolve();
  const auto data = cnf::prepare_data<float>(cfg);
  cnf::write_label_sidecar(out, data.labels);
  std::printf("noise %s  items %zu  mislabeled %zu  rate %.4f\n", cfg.noise.type.c_str(), data.labels.size(),
              data.labels.mislabeled(), data.labels.noise_rate());
  if (data.annotator_error)
    std::printf("annotator held-out error %.4f at epoch %.2f%s\n", *data.annotator_error, *data.annotator_epoch,
                data.annotator_in_band ? "" : " (outside band)");
  return 0;
}

// Test split predictions of a checkpoint under the config's data and split.
std::vector<int> predict_test(const RunArgs& args, const std::string& checkpoint,
                              cnf::PreparedData<float>& data) {
  const ExperimentConfig cfg = args.resolve();
  data = cnf::prepare_data<float>(cfg);
  auto fabric = cnf::load_checkpoint<float>(checkpoint);
  return cnf::predict(fabric, data.test, cfg.data.augment);
}

int cmd_evaluate(const RunArgs& args, const std::string& checkpoint) {
  cnf::PreparedData<float> data;
  const auto pred = predict_test(args, checkpoint, data);
  std::printf("test items %zu  error %.4f\n", pred.size(), cnf::error_rate(pred, data.test_labels.clean));
  return 0;
}

int cmd_fitting_report(const RunArgs& args, const std::string& checkpoint, const std::string& labels) {
  cnf::PreparedData<float> data;
  const auto pred = predict_test(args, checkpoint, data);
  cnf::LabeledSet test = data.test_labels;
  if (!labels.empty()) {
    const auto all = cnf::read_label_sidecar(labels);
    if (all.size() != data.all.size())
      throw cnf::InputError("label file has " + std::to_string(all.size()) + " items, dataset has " +
                            std::to_string(data.all.size()));
    test = all.subset(data.split.parts[2]);
  }
  const auto r = cnf::fitting_report(pred, test);
  std::cout << cnf::to_json(r).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional neural fabric training, pruning and label-noise toolkit"};
  app.require_subcommand(1);

  RunArgs train_args;
  auto* train = app.add_subcommand("train", "train (and optionally prune) a fabric");
  train_args.add(train);

  DimsArgs plan_dims;
  double plan_sparsity = 0.05;
  std::string plan_strategy = "iterative";
  std::optional<int> plan_epochs;
  bool plan_pre_link = false;
  auto* plan = app.add_subcommand("prune-plan", "print the prune plan without training");
  plan_dims.add(plan);
  plan->add_option("--sparsity", plan_sparsity, "fraction kept");
  plan->add_option("--strategy", plan_strategy)->check(CLI::IsMember({"early", "iterative", "late"}));
  plan->add_option("--epochs", plan_epochs, "rescale event epochs to this many total epochs");
  plan->add_flag("--pre-link-base", plan_pre_link, "measure the weight fraction before link pruning");

  DimsArgs count_dims;
  std::optional<double> count_sparsity;
  auto* count = app.add_subcommand("count-params", "parameter count of a fabric");
  count_dims.add(count);
  count->add_option("--sparsity", count_sparsity, "also print the reported pruned count");

  DimsArgs dot_dims;
  std::string dot_ckpt, dot_out;
  bool dot_pruned = false;
  auto* dot = app.add_subcommand("export-dot", "write a Graphviz diagram");
  dot_dims.add(dot);
  dot->add_option("--checkpoint", dot_ckpt)->check(CLI::ExistingFile);
  dot->add_option("--out", dot_out, "output file (stdout if omitted)");
  dot->add_flag("--show-pruned", dot_pruned, "draw removed links dashed");

  RunArgs noise_args;
  std::string noise_out = "noisy_labels.txt";
  auto* noise = app.add_subcommand("inject-noise", "write a clean/given label file");
  noise_args.add(noise, false);
  noise->add_option("--out", noise_out, "label file");

  RunArgs eval_args;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("evaluate", "test error of a checkpoint");
  eval_args.add(eval, false);
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);

  RunArgs fit_args;
  std::string fit_ckpt, fit_labels;
  auto* fit = app.add_subcommand("fitting-report", "clean and noisy fitting on the test split");
  fit_args.add(fit, false);
  fit->add_option("--checkpoint", fit_ckpt)->required()->check(CLI::ExistingFile);
  fit->add_option("--labels", fit_labels, "label file from inject-noise or a run")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_args);
    if (*plan) return cmd_prune_plan(plan_dims, plan_sparsity, plan_strategy, plan_epochs, plan_pre_link);
    if (*count) return cmd_count_params(count_dims, count_sparsity);
    if (*dot) return cmd_export_dot(dot_ckpt, dot_dims, dot_out, dot_pruned);
    if (*noise) return cmd_inject_noise(noise_args, noise_out);
    if (*eval) return cmd_evaluate(eval_args, eval_ckpt);
    if (*fit) return cmd_fitting_report(fit_args, fit_ckpt, fit_labels);
  } catch (const cnf::InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const cnf::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
