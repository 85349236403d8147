#pragma once

#include <string>
#include <vector>

#include "treelm/dataset.hpp"
#include "treelm/model.hpp"
#include "treelm/vocab.hpp"

namespace treelm {

// Input-gradient attribution: row = one predicted position (labeled with its
// target token), column = input position, cell = L2 norm over the embedding
// dimension of d loss(position) / d input embedding. Cells at columns at or
// beyond the predicted position are exactly zero.
struct SaliencyRow {
  std::int32_t target_position = 0;
  std::string target_label;
  bool correct = false;  // model's top-1 equals the target
  std::vector<float> cells;
};

struct SaliencyMap {
  std::vector<std::string> column_labels;
  std::vector<SaliencyRow> rows;
};

// One backward pass per requested target position, with the loss restricted
// to that position; positions must be owned by the segment's loss mask.
SaliencyMap saliency_map(const ModelParams<float>& params,
                         const PreparedSegment& segment, const Vocab& vocab,
                         const std::vector<int>& target_positions);

void export_heatmap_csv(const SaliencyMap& map, const std::string& path);
void export_heatmap_svg(const SaliencyMap& map, const std::string& path);

// CSV reader used for round-trip verification.
SaliencyMap parse_heatmap_csv(const std::string& path);

}  // namespace treelm
