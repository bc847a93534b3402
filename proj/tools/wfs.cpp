#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wfs/pipeline.hpp"

namespace {

Eigen::VectorXd parse_xi(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw wfs::Error(wfs::Errc::invalid_argument, "xi entry '" + item + "' is not a number");
    }
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), Eigen::Index(v.size()));
}

std::optional<wfs::fs::path> opt_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return wfs::fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wave-field surrogate pipeline: simulate, fit GP surrogates, super-resolve, assess"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", manifest, validation, model, xi, sr, example = "I",
              scale = "desk";
  std::vector<std::string> models, manifests;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config; keys override the defaults")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed");
    sub->add_option("--out", out_dir, "Output directory");
  };

  auto* gen = app.add_subcommand("generate", "Sample and simulate the train/validation datasets");
  common(gen);

  auto* fit = app.add_subcommand("fit", "Fit one GP family per stored snapshot time");
  common(fit);
  fit->add_option("--manifest", manifest, "Training manifest (default <out>/manifest_train.json)");
  fit->add_option("--validation", validation, "Validation manifest checked for disjointness");

  auto* pred = app.add_subcommand("predict", "GP prediction at one parameter vector, optionally enhanced");
  common(pred);
  pred->add_option("--model", model, "GP model bundle")->required()->check(CLI::ExistingFile);
  pred->add_option("--xi", xi, "Comma-separated parameter vector in config order")->required();
  pred->add_option("--sr", sr, "CARN checkpoint")->check(CLI::ExistingFile);

  auto* assess = app.add_subcommand("assess", "Score predictions against the validation set");
  common(assess);
  assess->add_option("--manifest", manifest, "Validation manifest (default <out>/manifest_validation.json)");
  assess->add_option("--model", models, "GP model bundles (default one per stored step in <out>)");
  assess->add_option("--sr", sr, "CARN checkpoint")->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train-sr", "Train the super-resolution network");
  common(train);
  train->add_option("--manifest", manifests, "Manifests supplying HR snapshots (default <out>/manifest_train.json)");

  auto* rep = app.add_subcommand("replicate", "End-to-end replication of example I or II");
  common(rep);
  rep->add_option("--example", example, "I or II")->check(CLI::IsMember({"I", "II"}));
  rep->add_option("--scale", scale, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  rep->add_option("--sr", sr, "Reuse this CARN checkpoint")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const wfs::fs::path out(out_dir);
    const int ex = example == "I" ? 1 : 2;
    wfs::PipelineConfig base = stage == "replicate" ? wfs::example_config(ex, scale == "desk")
                                                    : wfs::PipelineConfig{};
    wfs::PipelineConfig cfg = config_path.empty() ? base : wfs::load_config(config_path, base);
    if (!sr.empty()) cfg.sr.checkpoint = sr;
    cfg.validate();

    if (stage == "generate") {
      const auto pair = wfs::cmd_generate(cfg, seed, out);
      std::cout << "generated " << pair.train.rows.size() << " train / "
                << pair.validation.rows.size() << " validation realizations in " << out << "\n";
    } else if (stage == "fit") {
      const wfs::fs::path m = manifest.empty() ? wfs::train_manifest_path(out) : wfs::fs::path(manifest);
      std::optional<wfs::fs::path> v = opt_path(validation);
      if (!v && wfs::fs::exists(wfs::validation_manifest_path(m.parent_path())))
        v = wfs::validation_manifest_path(m.parent_path());
      for (const auto& p : wfs::cmd_fit(cfg, m, out, v)) std::cout << "wrote " << p << "\n";
    } else if (stage == "predict") {
      const auto o = wfs::cmd_predict(model, parse_xi(xi), opt_path(sr), out);
      std::cout << "wrote " << o.mean << " and " << o.mean_ppm << "\n";
      if (o.enhanced) std::cout << "wrote " << *o.enhanced << " and " << *o.enhanced_ppm << "\n";
    } else if (stage == "assess") {
      const wfs::fs::path m =
          manifest.empty() ? wfs::validation_manifest_path(out) : wfs::fs::path(manifest);
      std::vector<wfs::fs::path> ms(models.begin(), models.end());
      if (ms.empty())
        for (auto s : cfg.store_steps) ms.push_back(wfs::gp_model_path(out, s));
      const auto r = wfs::cmd_assess(cfg, m, ms, opt_path(sr), out);
      std::cout << r.to_text();
    } else if (stage == "train-sr") {
      std::vector<wfs::fs::path> ms(manifests.begin(), manifests.end());
      if (ms.empty()) ms.push_back(wfs::train_manifest_path(out));
      const auto o = wfs::cmd_train_sr(cfg, seed, ms, out);
      std::cout << "loss " << o.trace.front() << " -> " << o.trace.back() << " over "
                << o.trace.size() - 1 << " epochs; wrote " << o.checkpoint << "\n";
    } else if (stage == "replicate") {
      const auto o = wfs::cmd_replicate(ex, cfg, seed, out);
      for (const auto& r : o.reports)
        std::cout << r.label << ": mean GP SSIM " << r.mean_gp() << "\n";
      if (o.checkpoint) std::cout << "SR checkpoint " << *o.checkpoint << "\n";
    }
  } catch (const wfs::Error& e) {
    std::cerr << "wfs " << stage << ": " << wfs::to_string(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "wfs " << stage << ": " << e.what() << "\n";
    return 2;
  }
  return 0;
}
