// tcsmae: command-line entry point.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "tcsmae/tcsmae.hpp"

namespace fs = std::filesystem;
using tcsmae::ojson;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Git blob hash: sha1("blob <size>\0" + content).
std::string git_blob_sha1(const fs::path& file) {
  const std::vector<char> bytes = tcsmae::io::read_bytes(file);
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 || EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw tcsmae::IoError("sha1 failed for " + file.string());
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Hashes a file, or every regular file below a directory (sorted by path).
ojson hash_inputs(const fs::path& p) {
  ojson out = ojson::array();
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back({{"path", f.string()}, {"sha1", git_blob_sha1(f)}});
  } else if (fs::is_regular_file(p)) {
    out.push_back({{"path", p.string()}, {"sha1", git_blob_sha1(p)}});
    const fs::path side = tcsmae::io::sidecar_path(p);
    if (side != p && fs::is_regular_file(side)) out.push_back({{"path", side.string()}, {"sha1", git_blob_sha1(side)}});
  } else {
    throw tcsmae::IoError("input not found: " + p.string());
  }
  return out;
}

class RunManifest {
 public:
  RunManifest(std::string command, fs::path out) : command_(std::move(command)), out_(std::move(out)), started_(utc_now()) {}

  void input(const fs::path& p) {
    for (auto& e : hash_inputs(p)) inputs_.push_back(std::move(e));
  }
  void output(const std::string& name) { outputs_.push_back(name); }
  ojson& config() { return config_; }

  void write() {
    output("run_manifest.json");
    ojson outs = ojson::array();
    for (const auto& o : outputs_) outs.push_back((out_ / o).string());
    ojson j{{"command", command_}, {"config", config_}, {"inputs", inputs_},
            {"started", started_}, {"finished", utc_now()}, {"outputs", outs}};
    tcsmae::io::write_json(out_ / "run_manifest.json", j);
    for (const auto& o : outputs_)
      if (!fs::exists(out_ / o)) throw tcsmae::IoError("declared output missing: " + (out_ / o).string());
  }

 private:
  std::string command_;
  fs::path out_;
  std::string started_;
  ojson config_ = ojson::object();
  ojson inputs_ = ojson::array();
  std::vector<std::string> outputs_;
};

std::string json_escape_line(const std::string& s) { return ojson(s).dump(); }

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  std::size_t n = 200;
  tcsmae::PhantomSpec spec;
};

void run_phantom_gen(const PhantomArgs& a) {
  RunManifest rm("phantom gen", a.out);
  rm.config() = tcsmae::to_json(a.spec);
  rm.config()["n"] = a.n;
  tcsmae::generate_dataset(a.spec, a.n, a.out);
  rm.output("dataset.json");
  for (std::size_t i = 0; i < a.n; ++i) {
    rm.output(tcsmae::indexed_name("slice_", i));
    rm.output(tcsmae::indexed_name("mask_", i));
  }
  rm.write();
}

struct MaskPreviewArgs {
  std::string in;
  std::string out = "mask_preview";
  std::size_t slice = 0;
  std::string mask = "tissue";
  tcsmae::MaskOptions opts;
  std::uint64_t seed = 0;
};

tcsmae::MaskKind parse_mask_kind(const std::string& s) {
  if (s == "tissue") return tcsmae::MaskKind::Tissue;
  if (s == "patch") return tcsmae::MaskKind::Patch;
  throw tcsmae::InvalidArgument("mask: expected tissue or patch, got '" + s + "'");
}

void run_mask_preview(MaskPreviewArgs a) {
  a.opts.kind = parse_mask_kind(a.mask);
  const auto slices = tcsmae::io::read_volume(a.in);
  tcsmae::require(a.slice < slices.size(), "slice: index " + std::to_string(a.slice) + " out of range");
  RunManifest rm("mask preview", a.out);
  rm.input(a.in);
  const tcsmae::Sample s = tcsmae::make_sample(fs::path(a.in).filename().string(), slices[a.slice]);
  const tcsmae::TissueMask m = tcsmae::make_mask(s, a.opts, a.seed);
  fs::create_directories(a.out);
  tcsmae::Grid<std::uint8_t> img(m.height(), m.width());
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = m.bits[i] ? 255 : 0;
  tcsmae::io::write_pgm(fs::path(a.out) / "mask.pgm", img);
  tcsmae::io::write_ppm(fs::path(a.out) / "masked.ppm", tcsmae::apply_mask(s.rgb, m));
  ojson rec{{"seed", a.seed}, {"mask", a.mask}};
  if (a.opts.kind == tcsmae::MaskKind::Tissue) {
    rec["K"] = a.opts.k_intervals;
  } else {
    rec["patch_size"] = a.opts.patch_size;
  }
  rec["rho"] = a.opts.mask_ratio;
  rec["masked_intervals"] = m.masked_intervals;
  rec["masked_fraction"] = m.masked_fraction();
  tcsmae::io::write_json(fs::path(a.out) / "mask.json", rec);
  rm.config() = rec;
  for (const char* o : {"mask.pgm", "masked.ppm", "mask.json"}) rm.output(o);
  rm.write();
}

void run_pretrain(const tcsmae::PretrainConfig& cfg, const std::string& data, const std::string& out) {
  RunManifest rm("pretrain", out);
  rm.input(data);
  rm.config() = tcsmae::to_json(cfg);
  const tcsmae::Dataset ds = tcsmae::load_dataset(data);
  const auto result = tcsmae::pretrain(ds, cfg, out);
  std::cout << "pretrain: " << result.steps.size() << " steps, first-epoch L_ssim "
            << result.epoch_mean_ssim.front() << ", final-epoch L_ssim " << result.epoch_mean_ssim.back() << '\n';
  for (const char* o : {"checkpoint.bin", "manifest.json", "losses.csv", "config.resolved.json"}) rm.output(o);
  rm.write();
}

void run_finetune(const tcsmae::FinetuneConfig& cfg, const std::string& data, const std::string& out) {
  RunManifest rm("finetune", out);
  rm.input(data);
  if (cfg.from != "scratch") rm.input(cfg.from);
  rm.config() = tcsmae::to_json(cfg);
  const tcsmae::Dataset ds = tcsmae::load_dataset(data, true);
  const auto result = tcsmae::finetune(ds, cfg, out);
  std::cout << "finetune: final validation DSC " << result.final_val_dsc_percent() << "%\n";
  for (const char* o : {"checkpoint.bin", "manifest.json", "metrics.csv", "config.resolved.json"}) rm.output(o);
  rm.write();
}

void run_eval(const std::string& checkpoint, const std::string& data, const std::string& out) {
  RunManifest rm("eval", out);
  rm.input(checkpoint);
  rm.input(data);
  const tcsmae::UNet model = tcsmae::load_model(checkpoint);
  tcsmae::require(model.config().head.kind != tcsmae::HeadKind::Reconstruction,
                  "checkpoint: eval needs a segmentation checkpoint (use report for reconstruction)");
  const tcsmae::Dataset ds = tcsmae::load_dataset(data, true);
  const tcsmae::MetricReport rep = tcsmae::evaluate(model, ds);
  std::ostringstream csv;
  csv << "sample,class,dsc,hd\n";
  for (const auto& s : rep.samples)
    for (std::size_t c = 0; c < s.dsc.size(); ++c)
      csv << s.name << ',' << c + 1 << ',' << tcsmae::fmt_double(s.dsc[c]) << ','
          << (s.hd[c] ? tcsmae::fmt_double(*s.hd[c]) : "") << '\n';
  fs::create_directories(out);
  tcsmae::io::write_text(fs::path(out) / "metrics.csv", csv.str());
  auto stat = [](const tcsmae::Stat& s) { return ojson{{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}}; };
  ojson per_class = ojson::array();
  for (const auto& s : rep.per_class_dsc_percent) per_class.push_back(stat(s));
  tcsmae::io::write_json(fs::path(out) / "summary.json",
                         {{"samples", rep.samples.size()},
                          {"dsc_percent", stat(rep.dsc_percent)},
                          {"hd_pixels", stat(rep.hd_pixels)},
                          {"hd_undefined", rep.hd_undefined},
                          {"per_class_dsc_percent", per_class}});
  std::cout << "eval: DSC " << rep.dsc_percent.mean << " +- " << rep.dsc_percent.stddev << " %, HD "
            << rep.hd_pixels.mean << " px\n";
  rm.config() = {{"checkpoint", checkpoint}, {"data", data}};
  for (const char* o : {"metrics.csv", "summary.json"}) rm.output(o);
  rm.write();
}

struct ReportArgs {
  std::string checkpoint, data, out = "report", run;
  std::string mask = "tissue";
  tcsmae::MaskOptions opts;
  std::uint64_t seed = 0;
  bool ppm = false;
};

/// Reconstruction SSIM of masked vs unmasked inputs, plus the pretraining
/// loss curves when a run directory is given.
void run_report(ReportArgs a) {
  a.opts.kind = parse_mask_kind(a.mask);
  RunManifest rm("report", a.out);
  rm.input(a.checkpoint);
  rm.input(a.data);
  const tcsmae::UNet model = tcsmae::load_model(a.checkpoint);
  const tcsmae::Dataset ds = tcsmae::load_dataset(a.data);
  const auto rows = tcsmae::recon_ssim_report(model, ds, a.opts, a.seed);
  fs::create_directories(a.out);
  tcsmae::io::write_text(fs::path(a.out) / "recon_ssim.csv", tcsmae::recon_report_csv(rows));
  rm.output("recon_ssim.csv");
  ojson summary{{"samples", ds.size()},
                {"mean_ssim_unmasked", tcsmae::mean_ssim(rows, "unmasked")},
                {"mean_ssim_masked", tcsmae::mean_ssim(rows, "masked")}};
  if (!a.run.empty()) {
    rm.input(fs::path(a.run) / "losses.csv");
    fs::copy_file(fs::path(a.run) / "losses.csv", fs::path(a.out) / "losses.csv", fs::copy_options::overwrite_existing);
    rm.output("losses.csv");
  }
  if (a.ppm) {
    const tcsmae::Sample& s = ds.front();
    const tcsmae::TissueMask m = tcsmae::make_mask(s, a.opts, tcsmae::derive_seed(a.seed, {0x7265706FULL, 0}));
    const std::array<tcsmae::RgbSlice, 1> orig{s.rgb}, masked{tcsmae::apply_mask(s.rgb, m)};
    auto save = [&](const std::array<tcsmae::RgbSlice, 1>& in, const std::string& name) {
      const auto r = model.decode(model.encode(tcsmae::images_to_tensor(in)));
      const std::size_t h = r.dim(2), w = r.dim(3);
      for (std::size_t c = 0; c < r.dim(1); ++c) {
        tcsmae::Grid<double> g(h, w);
        for (std::size_t i = 0; i < h * w; ++i) g[i] = r[c * h * w + i];
        const std::string file = name + "_ch" + std::to_string(c) + ".pgm";
        tcsmae::io::write_pgm(fs::path(a.out) / file, g);
        rm.output(file);
      }
    };
    save(orig, "recon_unmasked");
    save(masked, "recon_masked");
    tcsmae::io::write_ppm(fs::path(a.out) / "input_masked.ppm", masked[0]);
    rm.output("input_masked.ppm");
  }
  tcsmae::io::write_json(fs::path(a.out) / "summary.json", summary);
  rm.output("summary.json");
  std::cout << "report: mean SSIM unmasked " << summary["mean_ssim_unmasked"] << ", masked "
            << summary["mean_ssim_masked"] << '\n';
  rm.config() = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"mask", a.mask}, {"k", a.opts.k_intervals},
                 {"rho", a.opts.mask_ratio}, {"patch_size", a.opts.patch_size}, {"seed", a.seed}};
  rm.write();
}

/// Overrides a config field only when the flag was given on the command line.
template <typename T, typename U>
void override_if(const CLI::Option* opt, T& field, const U& value) {
  if (opt->count() > 0) field = static_cast<T>(value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tissue-masked dual-branch autoencoder pretraining for CT slices"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  // phantom gen
  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Synthetic phantom datasets")->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "Generate a phantom dataset directory");
  gen->add_option("--out", ph.out, "Output dataset directory")->required();
  gen->add_option("--n", ph.n, "Number of slices")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--resolution", ph.spec.resolution, "Slice size in pixels (multiple of 32)")->capture_default_str();
  gen->add_option("--seed", ph.spec.seed, "Generator seed")->capture_default_str();
  gen->add_option("--lesion-prob", ph.spec.lesion_probability, "Probability that a slice carries a lesion")
      ->capture_default_str();

  // mask preview
  MaskPreviewArgs mp;
  auto* mask = app.add_subcommand("mask", "Masking utilities")->require_subcommand(1);
  auto* preview = mask->add_subcommand("preview", "Write a mask PGM, masked PPM and mask JSON for one slice");
  preview->add_option("--in", mp.in, "Input volume (.raw with .json sidecar)")->required();
  preview->add_option("--slice", mp.slice, "Slice index within the volume")->capture_default_str();
  preview->add_option("--out", mp.out, "Output directory")->capture_default_str();
  preview->add_option("--mask", mp.mask, "Masking strategy")->check(CLI::IsMember({"tissue", "patch"}))->capture_default_str();
  preview->add_option("--k", mp.opts.k_intervals, "Number of intensity intervals K")->capture_default_str();
  preview->add_option("--rho", mp.opts.mask_ratio, "Mask ratio")->capture_default_str();
  preview->add_option("--patch-size", mp.opts.patch_size, "Patch size for patch masking")->capture_default_str();
  preview->add_option("--seed", mp.seed, "Mask seed")->capture_default_str();

  // pretrain
  const tcsmae::PretrainConfig pd;
  tcsmae::PretrainConfig pv = pd;
  std::string p_config, p_data, p_out = "runs/pretrain", p_mask = "tissue", p_combine = "sum";
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining on unlabeled slices");
  pre->add_option("--config", p_config, "JSON config; flags override its fields");
  pre->add_option("--data", p_data, "Dataset directory (dataset.json)")->required();
  pre->add_option("--out", p_out, "Run directory")->capture_default_str();
  auto* o_seed = pre->add_option("--seed", pv.seed, "Seed for weights, masks and shuffling")->capture_default_str();
  auto* o_k = pre->add_option("--k", pv.mask.k_intervals, "Number of intensity intervals K")->capture_default_str();
  auto* o_rho = pre->add_option("--rho", pv.mask.mask_ratio, "Mask ratio")->capture_default_str();
  auto* o_mask = pre->add_option("--mask", p_mask, "Masking strategy")->check(CLI::IsMember({"tissue", "patch"}))->capture_default_str();
  auto* o_patch = pre->add_option("--patch-size", pv.mask.patch_size, "Patch size for patch masking")->capture_default_str();
  auto* o_scales = pre->add_option("--scales", pv.scales, "Pyramid levels used for contrastive learning")
                       ->check(CLI::Range(0, 3))->capture_default_str();
  auto* o_lambda = pre->add_option("--lambda", pv.lambda, "Contrastive loss weight")->capture_default_str();
  auto* o_epochs = pre->add_option("--epochs", pv.epochs, "Epochs")->capture_default_str();
  auto* o_batch = pre->add_option("--batch-size", pv.batch_size, "Batch size")->capture_default_str();
  auto* o_lr = pre->add_option("--lr", pv.lr, "Initial learning rate")->capture_default_str();
  auto* o_decay = pre->add_option("--lr-decay", pv.lr_decay, "Per-epoch learning-rate decay factor")->capture_default_str();
  auto* o_res = pre->add_option("--resolution", pv.resolution, "Expected slice size")->capture_default_str();
  auto* o_combine = pre->add_option("--recon-combine", p_combine, "Branch SSIM loss combination")
                        ->check(CLI::IsMember({"sum", "ratio"}))->capture_default_str();
  auto* o_flip = pre->add_flag("--hflip", pv.hflip, "Random horizontal flips");

  // finetune
  const tcsmae::FinetuneConfig fd;
  tcsmae::FinetuneConfig fv = fd;
  std::string f_config, f_data, f_out = "runs/finetune", f_head = "binary";
  auto* fin = app.add_subcommand("finetune", "Supervised segmentation finetuning");
  fin->add_option("--config", f_config, "JSON config; flags override its fields");
  fin->add_option("--data", f_data, "Labeled dataset directory")->required();
  fin->add_option("--out", f_out, "Run directory")->capture_default_str();
  auto* of_from = fin->add_option("--from", fv.from, "scratch, or a pretraining checkpoint path")->capture_default_str();
  auto* of_seed = fin->add_option("--seed", fv.seed, "Seed for head weights, split and shuffling")->capture_default_str();
  auto* of_epochs = fin->add_option("--epochs", fv.epochs, "Epochs")->capture_default_str();
  auto* of_batch = fin->add_option("--batch-size", fv.batch_size, "Batch size")->capture_default_str();
  auto* of_lr = fin->add_option("--lr", fv.lr, "Learning rate")->capture_default_str();
  auto* of_paper = fin->add_flag("--paper-lr", fv.paper_lr, "Use the published finetuning learning rate (1e-6)");
  auto* of_head = fin->add_option("--head", f_head, "Segmentation head")->check(CLI::IsMember({"binary", "multiclass"}))->capture_default_str();
  auto* of_classes = fin->add_option("--classes", fv.classes, "Class count for the multiclass head")->capture_default_str();
  auto* of_res = fin->add_option("--resolution", fv.resolution, "Slice size for scratch models")->capture_default_str();
  auto* of_folds = fin->add_option("--folds", fv.folds, "k-fold cross-validation (0 = holdout split)")->capture_default_str();
  auto* of_fold = fin->add_option("--fold", fv.fold, "Validation fold index")->capture_default_str();

  // eval
  std::string e_ck, e_data, e_out = "runs/eval";
  auto* ev = app.add_subcommand("eval", "Per-sample DSC and Hausdorff of a segmentation checkpoint");
  ev->add_option("--checkpoint", e_ck, "Checkpoint directory, checkpoint.bin or manifest.json")->required();
  ev->add_option("--data", e_data, "Labeled dataset directory")->required();
  ev->add_option("--out", e_out, "Output directory")->capture_default_str();

  // report
  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Masked vs unmasked reconstruction SSIM of a pretraining checkpoint");
  rep->add_option("--checkpoint", ra.checkpoint, "Pretraining checkpoint")->required();
  rep->add_option("--data", ra.data, "Dataset directory")->required();
  rep->add_option("--out", ra.out, "Output directory")->capture_default_str();
  rep->add_option("--run", ra.run, "Pretraining run directory whose losses.csv is copied");
  rep->add_option("--mask", ra.mask, "Masking strategy")->check(CLI::IsMember({"tissue", "patch"}))->capture_default_str();
  rep->add_option("--k", ra.opts.k_intervals, "Number of intensity intervals K")->capture_default_str();
  rep->add_option("--rho", ra.opts.mask_ratio, "Mask ratio")->capture_default_str();
  rep->add_option("--patch-size", ra.opts.patch_size, "Patch size for patch masking")->capture_default_str();
  rep->add_option("--seed", ra.seed, "Mask seed")->capture_default_str();
  rep->add_flag("--ppm", ra.ppm, "Also write reconstructions of the first sample as images");

  // model describe
  tcsmae::ModelConfig mc;
  std::string m_ck, m_head = "reconstruction";
  auto* model = app.add_subcommand("model", "Model utilities")->require_subcommand(1);
  auto* describe = model->add_subcommand("describe", "Print the layer and shape table");
  describe->add_option("--checkpoint", m_ck, "Describe the model stored in a checkpoint");
  describe->add_option("--resolution", mc.resolution, "Input size")->capture_default_str();
  describe->add_option("--scales", mc.mep.scales, "Projection levels")->check(CLI::Range(0, 3))->capture_default_str();
  describe->add_option("--head", m_head, "Head kind")->check(CLI::IsMember({"reconstruction", "binary", "multiclass"}))->capture_default_str();
  describe->add_option("--classes", mc.head.classes, "Class count for the multiclass head")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: {\"kind\":\"usage\",\"message\":" << json_escape_line(e.what()) << "}\n";
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    if (gen->parsed()) {
      run_phantom_gen(ph);
    } else if (preview->parsed()) {
      run_mask_preview(mp);
    } else if (pre->parsed()) {
      tcsmae::PretrainConfig cfg = p_config.empty() ? pd : tcsmae::pretrain_config_from_json(tcsmae::io::read_json(p_config));
      override_if(o_seed, cfg.seed, pv.seed);
      override_if(o_k, cfg.mask.k_intervals, pv.mask.k_intervals);
      override_if(o_rho, cfg.mask.mask_ratio, pv.mask.mask_ratio);
      if (o_mask->count()) cfg.mask.kind = parse_mask_kind(p_mask);
      override_if(o_patch, cfg.mask.patch_size, pv.mask.patch_size);
      override_if(o_scales, cfg.scales, pv.scales);
      override_if(o_lambda, cfg.lambda, pv.lambda);
      override_if(o_epochs, cfg.epochs, pv.epochs);
      override_if(o_batch, cfg.batch_size, pv.batch_size);
      override_if(o_lr, cfg.lr, pv.lr);
      override_if(o_decay, cfg.lr_decay, pv.lr_decay);
      override_if(o_res, cfg.resolution, pv.resolution);
      if (o_combine->count()) cfg.recon_combine = p_combine == "sum" ? tcsmae::ReconCombine::Sum : tcsmae::ReconCombine::Ratio;
      override_if(o_flip, cfg.hflip, pv.hflip);
      cfg.validate();
      run_pretrain(cfg, p_data, p_out);
    } else if (fin->parsed()) {
      tcsmae::FinetuneConfig cfg = f_config.empty() ? fd : tcsmae::finetune_config_from_json(tcsmae::io::read_json(f_config));
      override_if(of_from, cfg.from, fv.from);
      override_if(of_seed, cfg.seed, fv.seed);
      override_if(of_epochs, cfg.epochs, fv.epochs);
      override_if(of_batch, cfg.batch_size, fv.batch_size);
      override_if(of_lr, cfg.lr, fv.lr);
      override_if(of_paper, cfg.paper_lr, fv.paper_lr);
      if (of_head->count()) cfg.head = tcsmae::head_kind_from_string(f_head);
      override_if(of_classes, cfg.classes, fv.classes);
      override_if(of_res, cfg.resolution, fv.resolution);
      override_if(of_folds, cfg.folds, fv.folds);
      override_if(of_fold, cfg.fold, fv.fold);
      cfg.validate();
      run_finetune(cfg, f_data, f_out);
    } else if (ev->parsed()) {
      run_eval(e_ck, e_data, e_out);
    } else if (rep->parsed()) {
      run_report(ra);
    } else if (describe->parsed()) {
      if (!m_ck.empty()) {
        std::cout << tcsmae::load_model(m_ck).describe();
      } else {
        mc.head.kind = tcsmae::head_kind_from_string(m_head);
        mc.validate();
        std::cout << tcsmae::UNet(mc, 0).describe();
      }
    }
  } catch (const std::exception& e) {
    const char* kind = dynamic_cast<const tcsmae::InvalidArgument*>(&e)  ? "invalid_argument"
                       : dynamic_cast<const tcsmae::IoError*>(&e)        ? "io"
                       : dynamic_cast<const tcsmae::NonFiniteError*>(&e) ? "non_finite"
                                                                         : "internal";
    std::cerr << "error: {\"kind\":\"" << kind << "\",\"message\":" << json_escape_line(e.what()) << "}\n";
    return 1;
  }
  return 0;
}
