// protoseg command-line front end.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 internal error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protoseg/protoseg.hpp"

namespace fs = std::filesystem;
using namespace protoseg;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool strict_challenge = false;
};

ConfigDocument load_config(const GlobalOptions& g) {
  std::string path = g.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("PROTOSEG_CONFIG")) path = env;
  }
  ConfigDocument doc = path.empty() ? ConfigDocument(nlohmann::json::object()) : ConfigDocument::load(path);
  if (g.seed) doc.base().seed = *g.seed;
  return doc;
}

PipelineConfig config_for(const GlobalOptions& g, const std::string& class_name) {
  PipelineConfig c = load_config(g).for_class(class_name, g.strict_challenge);
  if (g.seed) c.seed = *g.seed;
  return c;
}

std::string bank_hash(const fs::path& bank_path) { return hex64(fnv1a64(read_file(bank_path))); }

int cmd_build_bank(const GlobalOptions& g, const fs::path& manifest_path, const fs::path& output) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  const PipelineConfig config = config_for(g, manifest.class_name);
  auto result = run_build_bank(manifest, config, g.jobs);
  write_bank(output, result.bank);
  write_text_atomic(split_path_for(output), split_to_json(result.split, config).dump(2) + "\n");
  std::cout << "bank: " << output.string() << " (" << result.split.bank_ids.size() << " images, "
            << result.split.holdout_ids.size() << " held out)\n";
  for (const auto& [id, fs] : result.bank.layers()) {
    std::cout << "  layer " << id << ": " << fs.count << " x " << fs.dim << "\n";
  }
  return 0;
}

int cmd_calibrate(const GlobalOptions& g, const fs::path& manifest_path, const fs::path& bank_path,
                  std::string split_arg, const fs::path& output) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  const PipelineConfig config = config_for(g, manifest.class_name);
  if (!fs::exists(bank_path)) fail_data("bank file not found: " + bank_path.string());
  const fs::path split_path = split_arg.empty() ? split_path_for(bank_path) : fs::path(split_arg);
  const MemoryBank bank = read_bank(bank_path);
  const HoldoutSplit split = read_split(split_path);
  CalibrationResult cal = run_calibrate(manifest, bank, split, config, g.jobs);
  cal.bank_hash = bank_hash(bank_path);
  write_calibration(output, cal);
  std::cout << "threshold: " << cal.threshold << " (p=" << cal.percentile << ", gain=" << cal.gain << ", "
            << cal.sample_count << " samples)\n";
  return 0;
}

int cmd_infer(const GlobalOptions& g, const fs::path& manifest_path, const fs::path& bank_path,
              const fs::path& cal_path, const fs::path& out_dir, const std::string& mask_format, bool full_res) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  const PipelineConfig config = config_for(g, manifest.class_name);
  if (!fs::exists(bank_path)) fail_data("bank file not found: " + bank_path.string());
  const MemoryBank bank = read_bank(bank_path);
  const CalibrationResult cal = read_calibration(cal_path);
  if (!cal.bank_hash.empty() && cal.bank_hash != bank_hash(bank_path)) {
    fail_data("calibration " + cal_path.string() + " was computed against a different bank");
  }
  InferOptions opts;
  opts.mask_format = parse_mask_format(mask_format);
  opts.full_resolution = full_res;
  opts.jobs = g.jobs;
  const auto failures = run_infer(manifest, bank, cal, config, out_dir, opts);
  for (const auto& f : failures) std::cerr << "error: " << f.image_id << ": " << f.message << "\n";
  std::cout << "inferred " << manifest.entries.size() - failures.size() << "/" << manifest.entries.size()
            << " images into " << out_dir.string() << "\n";
  return failures.empty() ? 0 : static_cast<int>(ErrorKind::data);
}

int cmd_evaluate(const GlobalOptions& g, const fs::path& pred_dir, const std::vector<std::string>& manifests,
                 const fs::path& output) {
  std::map<std::string, ClassReport> per_class;
  for (const auto& m : manifests) {
    const DatasetManifest manifest = read_manifest(m);
    const PipelineConfig config = config_for(g, manifest.class_name);
    if (per_class.contains(manifest.class_name)) fail_data("class " + manifest.class_name + " listed twice");
    per_class.emplace(manifest.class_name, run_evaluate_class(manifest, pred_dir, config.fpr_cap));
  }
  const EvaluationReport report = summarize(std::move(per_class));
  const std::string table = to_table(report);
  if (!output.empty()) {
    write_text_atomic(output, to_json(report).dump(2) + "\n");
    fs::path txt = output;
    txt.replace_extension(".txt");
    write_text_atomic(txt, table);
  }
  std::cout << table;
  return 0;
}

int cmd_synth(const std::string& spec_path, const fs::path& out_dir, const std::optional<std::uint64_t>& seed) {
  nlohmann::json j = nlohmann::json::object();
  if (!spec_path.empty()) {
    const auto bytes = read_file(spec_path);
    j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) fail_config(spec_path + ": synth spec is not valid JSON");
  }
  if (seed) j["seed"] = *seed;
  const SynthSpec spec = synth_spec_from_json(j);
  write_synth_dataset(synthesize(spec), spec, out_dir);
  std::cout << "synthetic dataset written to " << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free prototype-memory anomaly segmentation"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config_path, "Pipeline configuration (JSON); defaults to $PROTOSEG_CONFIG");
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the configured seed");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--strict-challenge", g.strict_challenge, "Refuse per-class configuration overrides");

  std::string manifest, bank, calibration, output, split, mask_format = "pgm", predictions, spec;
  std::vector<std::string> manifests;
  bool full_res = false;

  auto* build = app.add_subcommand("build-bank", "Build a prototype memory bank from a train manifest");
  build->add_option("--manifest", manifest)->required();
  build->add_option("--output", output, "Bank file (.sadb); split record goes next to it")->required();

  auto* calibrate = app.add_subcommand("calibrate", "Estimate the decision threshold on held-out train images");
  calibrate->add_option("--manifest", manifest)->required();
  calibrate->add_option("--bank", bank)->required();
  calibrate->add_option("--split", split, "Split record (default: <bank>.split.json)");
  calibrate->add_option("--output", output, "Calibration file (.json)")->required();

  auto* infer = app.add_subcommand("infer", "Score test images and write maps and masks");
  infer->add_option("--manifest", manifest)->required();
  infer->add_option("--bank", bank)->required();
  infer->add_option("--calibration", calibration)->required();
  infer->add_option("--output", output, "Output directory")->required();
  infer->add_option("--mask-format", mask_format, "pgm or png")->check(CLI::IsMember({"pgm", "png"}));
  infer->add_flag("--full-res", full_res, "Nearest-neighbour upscale masks to the original resolution");

  auto* evaluate = app.add_subcommand("evaluate", "Pixel-level F1 and AU-ROC of predicted masks");
  evaluate->add_option("--predictions", predictions, "Prediction directory")->required();
  evaluate->add_option("--manifest", manifests, "Ground-truth manifest (repeat per class)")->required();
  evaluate->add_option("--output", output, "Report (.json); a .txt table is written next to it");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic embedding dataset");
  synth->add_option("--spec", spec, "Synth generator settings (JSON); defaults apply when omitted");
  synth->add_option("--output", output, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::config);
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*build) return cmd_build_bank(g, manifest, output);
    if (*calibrate) return cmd_calibrate(g, manifest, bank, split, output);
    if (*infer) return cmd_infer(g, manifest, bank, calibration, output, mask_format, full_res);
    if (*evaluate) return cmd_evaluate(g, predictions, manifests, output);
    if (*synth) return cmd_synth(spec, output, g.seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::internal);
  }
  return static_cast<int>(ErrorKind::internal);
}
