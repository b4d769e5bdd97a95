#pragma once

// JSON weight container:
//   {"layers":[{"name":..., "shape":[rows, cols], "values":[row-major...]}...],
//    "meta":{...}}

#include <fstream>
#include <string>

#include <json.hpp>

#include "thermoloop/nn/autodiff.hpp"

namespace thermoloop::nn {

using json = nlohmann::json;

inline json to_json(const ParameterSet& set, const json& meta = json::object()) {
  json layers = json::array();
  for (const auto& p : set) {
    json values = json::array();
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) values.push_back(p.value(r, c));
    layers.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"values", values}});
  }
  return json{{"layers", layers}, {"meta", meta}};
}

/// Loads values into a set whose layout was already built from the same
/// configuration. Every parameter must be present with a matching shape.
inline void from_json(const json& doc, ParameterSet& set) {
  require(doc.contains("layers") && doc["layers"].is_array(), "weight file has no 'layers' array");
  for (const auto& layer : doc["layers"]) {
    const std::string name = layer.at("name").get<std::string>();
    const auto idx = set.find(name);
    require(idx.has_value(), "unexpected parameter in weight file: " + name);
    Tensor& v = set[*idx].value;
    const auto shape = layer.at("shape");
    require(shape.size() == 2 && shape[0].get<Eigen::Index>() == v.rows() &&
                shape[1].get<Eigen::Index>() == v.cols(),
            "shape mismatch for parameter " + name);
    const auto& values = layer.at("values");
    require(static_cast<Eigen::Index>(values.size()) == v.size(), "value count mismatch for " + name);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) = values[k++].get<double>();
  }
  require(doc["layers"].size() == set.size(), "weight file is missing parameters");
}

inline void write_json_file(const std::string& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(1) << '\n';
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return json::parse(in);
}

}  // namespace thermoloop::nn
