// bedseg: boundary/edge/depth segmentation toolkit CLI.
//
// Exit codes (stable):
//   0  success
//   1  usage error or incomplete evaluation (missing pairs)
//   2  I/O error
//   3  malformed file (format or payload length)
//   4  expand-embed: tensor missing or not expandable
//   5  training aborted on non-finite loss
//   6  shape mismatch
//
// stdout carries data and reports; stderr carries diagnostics and the
// resolved configuration echo.

#include "bedseg/checkpoint.hpp"
#include "bedseg/config.hpp"
#include "bedseg/image.hpp"
#include "bedseg/metrics.hpp"
#include "bedseg/net.hpp"
#include "bedseg/structmap.hpp"
#include "bedseg/synth.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

namespace {

using namespace bedseg;

int cmd_structmap(const std::string& depth_path, const std::string& out_path,
                  const std::string& components_text, float epsilon) {
  const ComponentSet components = ComponentSet::parse(components_text);
  std::cerr << "structmap: depth=" << depth_path << " out=" << out_path
            << " components=" << components.to_string() << " epsilon=" << epsilon << "\n";
  const Image depth_img = read_image(depth_path);
  const DepthMap depth = depth_from_image(depth_img);
  const StructureMap map = cumulative_structure_map(depth, components, epsilon);
  write_image(image_from_plane(map.values), out_path);
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& report_path,
             const std::string& format_name) {
  ReportFormat format;
  if (format_name == "text")
    format = ReportFormat::text;
  else if (format_name == "kv")
    format = ReportFormat::kv;
  else
    throw std::invalid_argument("eval: --format must be text or kv");
  std::cerr << "eval: pred=" << pred_dir << " gt=" << gt_dir << " format=" << format_name << "\n";

  const MetricReport report = evaluate_directory(pred_dir, gt_dir);
  const std::string text = format_report(report, format);
  std::cout << text;
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + report_path + " for writing");
    out << text;
  }
  for (const auto& s : report.skipped)
    std::cerr << "warning: skipped " << s.name << " (" << s.reason << ")\n";
  return report.complete() ? 0 : 1;
}

int cmd_expand_embed(const std::string& in_path, const std::string& out_path,
                     const std::string& tensor_name) {
  std::cerr << "expand-embed: in=" << in_path << " out=" << out_path << " tensor=" << tensor_name
            << "\n";
  Checkpoint ckpt = load_checkpoint(in_path);
  TensorEntry* entry = ckpt.find(tensor_name);
  if (!entry) {
    std::cerr << "error: tensor not found: " << tensor_name << "\n";
    return 4;
  }
  try {
    entry->tensor = std::visit(
        [](const auto& t) -> TensorData { return expand_patch_embed(t); }, entry->tensor);
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  save_checkpoint(ckpt, out_path);
  return 0;
}

int cmd_synth(const std::string& out_dir, int n, int size, std::uint64_t seed) {
  std::cerr << "synth: out=" << out_dir << " n=" << n << " size=" << size << " seed=" << seed
            << "\n";
  write_synth_dataset(out_dir, n, size, seed);
  return 0;
}

int cmd_train(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open config " + config_path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const TrainOptions opt = TrainOptions::from_kv(parse_kv_text(text));
  std::cerr << "train: resolved config\n" << opt.resolved_text();

  const auto dataset = load_dataset(opt.data_dir);
  std::vector<TrainSample<float>> samples;
  samples.reserve(dataset.size());
  for (const auto& d : dataset) {
    TrainSample<float> s;
    s.input = build_input(d.rgb, &d.depth, opt.net.depth_input, opt.pipeline.components,
                          opt.pipeline.epsilon);
    s.gt = d.gt;
    samples.push_back(std::move(s));
  }

  const TrainResult result = train<float>(opt.net, samples, opt.pipeline);
  save_checkpoint(result.checkpoint, opt.out_checkpoint);
  {
    std::ofstream trace(opt.loss_trace, std::ios::binary | std::ios::trunc);
    if (!trace) throw IoError("cannot open " + opt.loss_trace + " for writing");
    char buf[64];
    for (std::size_t i = 0; i < result.step_loss.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu %.9f\n", i, result.step_loss[i]);
      trace << buf;
    }
  }
  {
    std::ofstream resolved(opt.out_checkpoint + ".config", std::ios::binary | std::ios::trunc);
    resolved << opt.resolved_text();
  }
  std::cerr << "train: steps=" << result.step_loss.size() << " initial_loss=" << result.initial_loss
            << " final_loss=" << result.final_loss << "\n";
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& rgb_path,
                const std::string& depth_path, const std::string& out_path) {
  std::cerr << "predict: ckpt=" << ckpt_path << " rgb=" << rgb_path << " depth=" << depth_path
            << " out=" << out_path << "\n";
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto [cfg, meta] = SegModel<float>::meta_from_checkpoint(ckpt);

  const Image rgb = read_image(rgb_path);
  const Image* depth_ptr = nullptr;
  Image depth;
  if (cfg.depth_input != DepthInput::none) {
    if (depth_path.empty())
      throw std::invalid_argument("predict: model expects a depth input (--depth)");
    depth = read_image(depth_path);
    if (depth.width != rgb.width || depth.height != rgb.height)
      throw DimensionError("predict: depth and rgb dimensions differ");
    depth_ptr = &depth;
  }
  const Tensor<float> input = build_input(rgb, depth_ptr, cfg.depth_input, meta.components,
                                          meta.epsilon);
  const ProbMask mask = predict(ckpt, input);
  write_image(image_from_plane(mask.values), out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"boundary/edge/depth segmentation toolkit"};
  app.require_subcommand(1);

  std::string depth_path, out_path, components_text = "depth,inverse,centered";
  float epsilon = 0.01f;
  auto* sm = app.add_subcommand("structmap", "depth map -> cumulative soft-edge map (PGM)");
  sm->add_option("--depth", depth_path, "input depth PGM")->required();
  sm->add_option("--out", out_path, "output PGM path")->required();
  sm->add_option("--components", components_text, "subset of depth,inverse,centered");
  sm->add_option("--epsilon", epsilon, "reciprocal-depth epsilon");

  std::string pred_dir, gt_dir, report_path, format_name = "text";
  auto* ev = app.add_subcommand("eval", "evaluate prediction masks against ground truth");
  ev->add_option("--pred", pred_dir, "directory of predicted masks")->required();
  ev->add_option("--gt", gt_dir, "directory of ground-truth masks")->required();
  ev->add_option("--report", report_path, "also write the report to this file");
  ev->add_option("--format", format_name, "text or kv");

  std::string ckpt_in, ckpt_out, tensor_name;
  auto* ee = app.add_subcommand("expand-embed", "expand a 3-channel patch-embed tensor to 4");
  ee->add_option("--in", ckpt_in, "input checkpoint")->required();
  ee->add_option("--out", ckpt_out, "output checkpoint")->required();
  ee->add_option("--tensor", tensor_name, "tensor name to expand")->required();

  std::string synth_dir;
  int synth_n = 16, synth_size = 64;
  std::uint64_t synth_seed = 1;
  auto* sy = app.add_subcommand("synth", "generate a synthetic dataset");
  sy->add_option("--out", synth_dir, "output directory")->required();
  sy->add_option("--n", synth_n, "number of samples");
  sy->add_option("--size", synth_size, "image size");
  sy->add_option("--seed", synth_seed, "random seed");

  std::string config_path;
  auto* tr = app.add_subcommand("train", "train from a key=value config file");
  tr->add_option("--config", config_path, "config file")->required();

  std::string pr_ckpt, pr_rgb, pr_depth, pr_out;
  auto* pr = app.add_subcommand("predict", "predict a saliency mask");
  pr->add_option("--ckpt", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--rgb", pr_rgb, "input RGB PPM")->required();
  pr->add_option("--depth", pr_depth, "input depth PGM (for 4-channel models)");
  pr->add_option("--out", pr_out, "output mask PGM")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sm->parsed()) return cmd_structmap(depth_path, out_path, components_text, epsilon);
    if (ev->parsed()) return cmd_eval(pred_dir, gt_dir, report_path, format_name);
    if (ee->parsed()) return cmd_expand_embed(ckpt_in, ckpt_out, tensor_name);
    if (sy->parsed()) return cmd_synth(synth_dir, synth_n, synth_size, synth_seed);
    if (tr->parsed()) return cmd_train(config_path);
    if (pr->parsed()) return cmd_predict(pr_ckpt, pr_rgb, pr_depth, pr_out);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DtypeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const LengthError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NanError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
