#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "safe/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string split = "eval";
  std::vector<std::string> sets;
  std::vector<std::size_t> frames;
  bool inject_fault = false;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run config (defaults apply when omitted)");
  sub->add_option("--seed", f.seed, "override the top-level seed");
  sub->add_option("--out", f.out, "output directory (overrides out_dir)");
  sub->add_option("--checkpoint", f.checkpoint, "checkpoint path (default <out>/checkpoint.bin)");
  sub->add_option("--set", f.sets, "override any config key, e.g. --set optim.epochs=5");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAFE frame-event fusion: data synthesis, training, evaluation and verification"};
  app.require_subcommand(1, 1);
  Flags f;
  using Cmd = int (*)(const safe::RunConfig&, const safe::CommandOptions&);
  std::vector<std::pair<CLI::App*, Cmd>> cmds;
  auto add = [&](const char* name, const char* help, Cmd fn) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, f);
    cmds.emplace_back(sub, fn);
    return sub;
  };
  add("synth-data", "write a synthetic RGB+event dataset", safe::cmd_synth_data);
  add("train", "train and write metrics.jsonl plus a checkpoint", safe::cmd_train);
  add("eval", "evaluate a checkpoint", safe::cmd_eval)->add_option("--split", f.split, "train or eval");
  add("ablate", "six switch patterns x ablate.seeds", safe::cmd_ablate);
  add("sweep-frames", "one run per frame count", safe::cmd_sweep_frames)
      ->add_option("--frames", f.frames, "frame counts (default sweep.frame_counts)");
  add("sweep-prompts", "one run per prompt template", safe::cmd_sweep_prompts);
  add("grad-check", "finite-difference gradient verification", safe::cmd_grad_check)
      ->add_flag("--inject-fault", f.inject_fault, "corrupt the matmul backward pass (negative control)");
  add("dump-embeddings", "pooled features of a checkpoint as CSV", safe::cmd_dump_embeddings)
      ->add_option("--split", f.split, "train or eval");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : safe::kExitConfig;
  }

  try {
    auto sets = f.sets;
    if (f.seed) sets.push_back("seed=" + std::to_string(*f.seed));
    if (!f.frames.empty()) sets.push_back("sweep.frame_counts=" + nlohmann::json(f.frames).dump());
    const auto cfg = safe::load_run_config(f.config, sets);
    safe::CommandOptions opt;
    opt.out = f.out;
    opt.checkpoint = f.checkpoint;
    opt.split = f.split;
    opt.inject_fault = f.inject_fault;
    for (auto& [sub, fn] : cmds)
      if (sub->parsed()) return fn(cfg, opt);
  } catch (const safe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return safe::kExitConfig;
  } catch (const safe::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return safe::kExitIo;
  } catch (const safe::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return safe::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return safe::kExitVerification;
  }
  return safe::kExitVerification;
}
