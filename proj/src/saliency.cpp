#include "treelm/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "treelm/eval.hpp"

namespace treelm {

SaliencyMap saliency_map(const ModelParams<float>& params,
                         const PreparedSegment& segment, const Vocab& vocab,
                         const std::vector<int>& target_positions) {
  const ModelKind kind = params.cfg.kind;
  const ModelInput input = to_model_input(segment, kind);
  const int n = static_cast<int>(input.tokens.size());
  const LossRows all_rows =
      loss_rows(segment.tokens, segment.loss_mask, segment.leaf,
                kind_predicts_leaves_only(kind));

  // One clean forward for labels/correctness; per-position backward reuses a
  // mutable copy of the params purely as gradient scratch space.
  Activations<float> acts;
  model_forward<float>(params, input, acts);
  ModelParams<float> scratch = params.cast<float>();
  scratch.ensure_grads();

  SaliencyMap map;
  map.column_labels.reserve(static_cast<std::size_t>(n));
  for (std::int32_t id : input.tokens)
    map.column_labels.push_back(vocab.decode_parts(id).text);

  for (int p : target_positions) {
    if (p < 1 || p >= n)
      fail(Error::Kind::Shape,
           "saliency position " + std::to_string(p) + " out of range");
    if (!all_rows.rows[static_cast<std::size_t>(p - 1)])
      fail(Error::Kind::Shape, "position " + std::to_string(p) +
                                   " is not a loss-mask position");
    LossRows one;
    one.targets.assign(static_cast<std::size_t>(n), 0);
    one.rows.assign(static_cast<std::size_t>(n), 0);
    one.rows[static_cast<std::size_t>(p - 1)] = 1;
    one.targets[static_cast<std::size_t>(p - 1)] =
        segment.tokens[static_cast<std::size_t>(p)];
    one.count = 1;

    scratch.zero_grads();
    MatF input_grad;
    model_backward<float>(scratch, input, acts, one, 1.0f, &input_grad);

    SaliencyRow row;
    row.target_position = p;
    row.target_label =
        vocab.decode_parts(segment.tokens[static_cast<std::size_t>(p)]).text;
    row.correct = rank_of_target(acts.logits.row(p - 1).data(),
                                 static_cast<int>(acts.logits.cols()),
                                 segment.tokens[static_cast<std::size_t>(p)]) == 1;
    row.cells.resize(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j)
      row.cells[static_cast<std::size_t>(j)] = input_grad.row(j).norm();
    map.rows.push_back(std::move(row));
  }
  return map;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void export_heatmap_csv(const SaliencyMap& map, const std::string& path) {
  if (map.rows.empty()) fail(Error::Kind::Shape, "empty saliency map");
  std::ofstream out(path);
  if (!out) fail(Error::Kind::Io, "cannot write " + path);
  out << std::setprecision(9);
  out << "target";
  for (const std::string& label : map.column_labels)
    out << "," << csv_escape(label);
  out << "\n";
  for (const SaliencyRow& row : map.rows) {
    out << csv_escape(row.target_label);
    for (float v : row.cells) out << "," << v;
    out << "\n";
  }
  if (!out) fail(Error::Kind::Io, "failed writing " + path);
}

SaliencyMap parse_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open " + path);
  SaliencyMap map;
  std::string line;
  if (!std::getline(in, line)) fail(Error::Kind::Parse, path + ": empty csv");
  std::vector<std::string> head = csv_split(line);
  map.column_labels.assign(head.begin() + 1, head.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = csv_split(line);
    SaliencyRow row;
    row.target_label = cells[0];
    for (std::size_t i = 1; i < cells.size(); ++i)
      row.cells.push_back(std::stof(cells[i]));
    map.rows.push_back(std::move(row));
  }
  return map;
}

void export_heatmap_svg(const SaliencyMap& map, const std::string& path) {
  if (map.rows.empty()) fail(Error::Kind::Shape, "empty saliency map");
  const int n_cols = static_cast<int>(map.column_labels.size());
  const int n_rows = static_cast<int>(map.rows.size());
  const int cell = 14;
  const int left = 140;
  const int top = 120;
  const int width = left + n_cols * cell + 10;
  const int height = top + n_rows * cell + 10;

  std::ofstream out(path);
  if (!out) fail(Error::Kind::Io, "cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"10\">\n";
  out << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  auto xml_escape = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      switch (c) {
        case '&': o += "&amp;"; break;
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '"': o += "&quot;"; break;
        default: o += c;
      }
    }
    return o;
  };
  for (int j = 0; j < n_cols; ++j) {
    out << "<text x=\"" << (left + j * cell + cell / 2) << "\" y=\"" << (top - 6)
        << "\" text-anchor=\"start\" transform=\"rotate(-60 "
        << (left + j * cell + cell / 2) << " " << (top - 6) << ")\">"
        << xml_escape(map.column_labels[static_cast<std::size_t>(j)])
        << "</text>\n";
  }
  for (int i = 0; i < n_rows; ++i) {
    const SaliencyRow& row = map.rows[static_cast<std::size_t>(i)];
    // Green/red row label for a correct/wrong top-1 prediction.
    out << "<text x=\"" << (left - 6) << "\" y=\"" << (top + i * cell + cell - 3)
        << "\" text-anchor=\"end\" fill=\"" << (row.correct ? "green" : "red")
        << "\">" << xml_escape(row.target_label) << "</text>\n";
    float row_max = 0.0f;
    for (float v : row.cells) row_max = std::max(row_max, v);
    for (int j = 0; j < static_cast<int>(row.cells.size()); ++j) {
      // Intensity is per-row normalized: cell / row-max.
      const float t =
          row_max > 0 ? row.cells[static_cast<std::size_t>(j)] / row_max : 0.0f;
      const int shade = 255 - static_cast<int>(std::lround(t * 255.0f));
      out << "<rect x=\"" << (left + j * cell) << "\" y=\"" << (top + i * cell)
          << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
          << shade << "," << shade << ",255)\" stroke=\"#ddd\"/>\n";
    }
  }
  out << "</svg>\n";
  if (!out) fail(Error::Kind::Io, "failed writing " + path);
}

}  // namespace treelm
