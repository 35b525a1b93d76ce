#pragma once

#include "bedseg/net.hpp"

#include <filesystem>
#include <map>
#include <sstream>
#include <string>

namespace bedseg {

/// Flat key=value configuration; '#' starts a comment, blank lines are
/// ignored, duplicate or unknown keys are rejected.
inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError("config line " + std::to_string(line_no) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw FormatError("config: duplicate key " + key);
  }
  return kv;
}

struct TrainOptions {
  NetConfig net;
  PipelineMeta pipeline;
  std::string data_dir;
  std::string out_checkpoint = "model.bedt";
  std::string loss_trace = "loss_trace.txt";

  static TrainOptions from_kv(const std::map<std::string, std::string>& kv) {
    TrainOptions opt;
    auto parse_bool = [](const std::string& v, const std::string& key) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw FormatError("config: bad boolean for " + key + ": " + v);
    };
    for (const auto& [key, value] : kv) {
      try {
        if (key == "seed")
          opt.net.seed = std::stoull(value);
        else if (key == "input_size")
          opt.net.input_size = std::stoi(value);
        else if (key == "channels") {
          std::istringstream ss(value);
          std::string tok;
          int i = 0;
          while (std::getline(ss, tok, ',')) {
            if (i >= 4) throw FormatError("config: channels expects 4 values");
            opt.net.channels_per_level[i++] = std::stoi(tok);
          }
          if (i != 4) throw FormatError("config: channels expects 4 values");
        } else if (key == "rfb_channels")
          opt.net.rfb_channels = std::stoi(value);
        else if (key == "lora")
          opt.net.lora_enabled = parse_bool(value, key);
        else if (key == "lora_rank")
          opt.net.lora_rank = std::stoi(value);
        else if (key == "lora_alpha")
          opt.net.lora_alpha = std::stof(value);
        else if (key == "lora_patch_embed")
          opt.net.lora_patch_embed = parse_bool(value, key);
        else if (key == "depth_input")
          opt.net.depth_input = depth_input_from_string(value);
        else if (key == "edge_components")
          opt.pipeline.components = ComponentSet::parse(value);
        else if (key == "epsilon")
          opt.pipeline.epsilon = std::stof(value);
        else if (key == "epochs")
          opt.net.epochs = std::stoi(value);
        else if (key == "batch")
          opt.net.batch = std::stoi(value);
        else if (key == "lr")
          opt.net.lr = std::stod(value);
        else if (key == "weight_decay")
          opt.net.weight_decay = std::stod(value);
        else if (key == "data_dir")
          opt.data_dir = value;
        else if (key == "out_checkpoint")
          opt.out_checkpoint = value;
        else if (key == "loss_trace")
          opt.loss_trace = value;
        else
          throw FormatError("config: unknown key " + key);
      } catch (const std::invalid_argument& e) {
        throw FormatError("config: bad value for " + key + ": " + value + " (" + e.what() + ")");
      }
    }
    opt.net.validate();
    if (opt.data_dir.empty()) throw FormatError("config: data_dir is required");
    return opt;
  }

  /// Canonical serialization; feeding this back through from_kv reproduces
  /// the identical run.
  std::string resolved_text() const {
    std::ostringstream out;
    out << "batch=" << net.batch << "\n";
    out << "channels=" << net.channels_per_level[0] << "," << net.channels_per_level[1] << ","
        << net.channels_per_level[2] << "," << net.channels_per_level[3] << "\n";
    out << "data_dir=" << data_dir << "\n";
    out << "depth_input=" << to_string(net.depth_input) << "\n";
    out << "edge_components=" << pipeline.components.to_string() << "\n";
    out << "epochs=" << net.epochs << "\n";
    out << "epsilon=" << pipeline.epsilon << "\n";
    out << "input_size=" << net.input_size << "\n";
    out << "lora=" << (net.lora_enabled ? "true" : "false") << "\n";
    out << "lora_alpha=" << net.lora_alpha << "\n";
    out << "lora_patch_embed=" << (net.lora_patch_embed ? "true" : "false") << "\n";
    out << "lora_rank=" << net.lora_rank << "\n";
    out << "loss_trace=" << loss_trace << "\n";
    out << "lr=" << net.lr << "\n";
    out << "out_checkpoint=" << out_checkpoint << "\n";
    out << "rfb_channels=" << net.rfb_channels << "\n";
    out << "seed=" << net.seed << "\n";
    out << "weight_decay=" << net.weight_decay << "\n";
    return out.str();
  }
};

}  // namespace bedseg
