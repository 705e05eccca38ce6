// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "loraserve/adapter.hpp"
#include "loraserve/model.hpp"

namespace loraserve {

// Fixture layout: a manifest JSON naming per-layer weight files, the head
// file, and each adapter's factor files, all in the binary matrix format.

struct ModelFixture {
  BaseModel model;
  AdapterSet adapters;
};

inline void save_model_fixture(BaseModel& model, const AdapterSet& adapters,
                               const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["num_layers"] = model.num_layers();
  manifest["hidden_dim"] = model.hidden_dim();
  manifest["vocab_size"] = model.vocab_size();
  manifest["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const std::string name = "layer" + std::to_string(l) + ".bin";
    save_matrix<float>(model.layer(l), dir / name);
    manifest["layers"].push_back(name);
  }
  save_matrix<float>(model.lm_head(), dir / "lm_head.bin");
  manifest["lm_head"] = "lm_head.bin";
  manifest["adapters"] = nlohmann::json::array();
  for (const auto& [id, adapter] : adapters) {
    nlohmann::json a;
    a["id"] = id;
    a["rank"] = adapter.rank();
    a["down"] = nlohmann::json::array();
    a["up"] = nlohmann::json::array();
    for (std::size_t l = 0; l < adapter.num_layers(); ++l) {
      const std::string dn =
          "adapter" + std::to_string(id) + "_down" + std::to_string(l) + ".bin";
      const std::string un =
          "adapter" + std::to_string(id) + "_up" + std::to_string(l) + ".bin";
      save_matrix<float>(adapter.down(l), dir / dn);
      save_matrix<float>(adapter.up(l), dir / un);
      a["down"].push_back(dn);
      a["up"].push_back(un);
    }
    if (adapter.has_task_head()) {
      const std::string tn = "adapter" + std::to_string(id) + "_head.bin";
      save_matrix<float>(adapter.task_head(), dir / tn);
      a["task_head"] = tn;
    }
    manifest["adapters"].push_back(a);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline ModelFixture load_model_fixture(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest: " + std::string(e.what()));
  }
  const std::size_t L = manifest.at("num_layers");
  const std::size_t d = manifest.at("hidden_dim");
  const std::size_t V = manifest.at("vocab_size");
  BaseModel model(L, d, V);
  const auto& layers = manifest.at("layers");
  if (layers.size() != L) throw IoError("manifest lists wrong layer count");
  for (std::size_t l = 0; l < L; ++l) {
    Matrix<float> w = load_matrix<float>(dir / layers[l].get<std::string>());
    if (w.rows() != d || w.cols() != d) {
      throw ShapeError("layer file must be hidden_dim x hidden_dim");
    }
    std::copy(w.data(), w.data() + w.size(), model.layer(l).data);
  }
  model.set_lm_head(
      load_matrix<float>(dir / manifest.at("lm_head").get<std::string>()));

  AdapterSet adapters;
  for (const auto& a : manifest.at("adapters")) {
    const int id = a.at("id");
    const std::size_t rank = a.at("rank");
    std::vector<Matrix<float>> down, up;
    for (const auto& f : a.at("down")) {
      down.push_back(load_matrix<float>(dir / f.get<std::string>()));
    }
    for (const auto& f : a.at("up")) {
      up.push_back(load_matrix<float>(dir / f.get<std::string>()));
    }
    std::optional<Matrix<float>> head;
    if (a.contains("task_head")) {
      head = load_matrix<float>(dir / a.at("task_head").get<std::string>());
    }
    adapters.emplace(id, LoraAdapter(id, L, d, rank, std::move(down),
                                     std::move(up), std::move(head)));
  }
  return ModelFixture{std::move(model), std::move(adapters)};
}

}  // namespace loraserve
