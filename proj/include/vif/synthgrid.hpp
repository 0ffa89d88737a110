// Grid-recall task: an image is a K x K grid of symbols and the target
// sequence is the grid read back in row-major order, EOS-terminated. The
// token needed at step t is exactly cell t, so visual grounding demand is
// uniform in generation depth.
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vif/tensor.hpp"

namespace vif {

// Token layout: specials first, then one token per grid symbol.
struct Vocabulary {
  int n_symbols = 0;

  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMark = 3;  // task marker closing the prompt
  static constexpr int kNumSpecials = 4;

  int size() const { return kNumSpecials + n_symbols; }
  int symbol_token(int symbol) const {
    require(symbol >= 0 && symbol < n_symbols, "Vocabulary: symbol id out of range");
    return kNumSpecials + symbol;
  }
  bool is_symbol(int token) const {
    return token >= kNumSpecials && token < size();
  }
  int token_symbol(int token) const { return is_symbol(token) ? token - kNumSpecials : -1; }
};

struct GridImage {
  int k = 0;               // grid side
  std::vector<int> cells;  // k*k symbol ids, row-major

  int n_cells() const { return k * k; }
};

struct TaskSample {
  GridImage image;
  std::vector<int> prompt;   // [BOS, MARK]
  std::vector<int> targets;  // k*k cell symbol tokens, then EOS
};

struct DatasetSpec {
  int k = 8;
  int s = 16;       // alphabet size
  int n_samples = 0;
};

inline TaskSample make_sample(GridImage image, const Vocabulary& vocab) {
  TaskSample sample;
  sample.prompt = {Vocabulary::kBos, Vocabulary::kMark};
  sample.targets.reserve(static_cast<size_t>(image.n_cells()) + 1);
  for (int c : image.cells) sample.targets.push_back(vocab.symbol_token(c));
  sample.targets.push_back(Vocabulary::kEos);
  sample.image = std::move(image);
  return sample;
}

// Deterministic per seed; cells are i.i.d. uniform over the alphabet.
inline std::vector<TaskSample> gen_dataset(const DatasetSpec& spec, uint64_t seed,
                                           int vocab_size = 0) {
  require(spec.s >= 2, "gen_dataset: alphabet size must be >= 2");
  require(spec.k >= 1, "gen_dataset: grid side must be >= 1");
  require(spec.n_samples >= 0, "gen_dataset: negative sample count");
  Vocabulary vocab{spec.s};
  if (vocab_size > 0)
    require(vocab_size >= vocab.size(),
            "gen_dataset: vocab too small for " + std::to_string(spec.s) +
                " symbols plus specials");
  Rng rng = Rng(seed).split(0x67726964 /* "grid" */);
  std::vector<TaskSample> out;
  out.reserve(static_cast<size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    GridImage img;
    img.k = spec.k;
    img.cells.resize(static_cast<size_t>(spec.k) * spec.k);
    for (auto& c : img.cells) c = rng.uniform_int(spec.s);
    out.push_back(make_sample(std::move(img), vocab));
  }
  return out;
}

// Accuracy at each symbol position t over all samples; a trace that ended
// before position t counts as incorrect there. Length is k*k (the EOS
// position is not scored).
inline std::vector<double> per_position_accuracy(
    const std::vector<std::vector<int>>& generated,
    const std::vector<TaskSample>& samples) {
  require(generated.size() == samples.size(),
          "per_position_accuracy: traces not aligned to samples");
  require(!samples.empty(), "per_position_accuracy: empty sample set");
  const int n_pos = samples.front().image.n_cells();
  std::vector<double> acc(static_cast<size_t>(n_pos), 0.0);
  for (size_t i = 0; i < samples.size(); ++i) {
    require(samples[i].image.n_cells() == n_pos,
            "per_position_accuracy: mixed grid sizes");
    const auto& gen = generated[i];
    const auto& tgt = samples[i].targets;
    for (int t = 0; t < n_pos; ++t)
      if (t < static_cast<int>(gen.size()) && gen[static_cast<size_t>(t)] == tgt[static_cast<size_t>(t)])
        acc[static_cast<size_t>(t)] += 1.0;
  }
  for (auto& a : acc) a /= static_cast<double>(samples.size());
  return acc;
}

// ---------------------------------------------------------------------------
// Dataset file: '#'-prefixed header lines, then one sample per line with
// five whitespace-separated fields:
//   K S cells prompt targets
// where cells/prompt/targets are comma-separated integer lists.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& where) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t pos = 0;
      out.push_back(std::stoi(item, &pos));
      require(pos == item.size(), where + ": trailing characters in '" + item + "'");
    } catch (const std::logic_error&) {
      throw Error(where + ": expected integer, got '" + item + "'");
    }
  }
  require(!out.empty(), where + ": empty id list");
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

inline void write_dataset(const std::string& path, const DatasetSpec& spec,
                          uint64_t seed, const std::vector<TaskSample>& samples) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "write_dataset: cannot open " + path);
  f << "# grid-recall dataset\n";
  f << "# k = " << spec.k << "\n";
  f << "# s = " << spec.s << "\n";
  f << "# n = " << samples.size() << "\n";
  f << "# seed = " << seed << "\n";
  for (const auto& s : samples) {
    f << s.image.k << ' ' << spec.s << ' ' << detail::join_ints(s.image.cells) << ' '
      << detail::join_ints(s.prompt) << ' ' << detail::join_ints(s.targets) << '\n';
  }
  require(f.good(), "write_dataset: write failure on " + path);
}

inline std::vector<TaskSample> read_dataset(const std::string& path,
                                            DatasetSpec* spec_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "read_dataset: cannot open " + path);
  std::vector<TaskSample> out;
  DatasetSpec spec;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path + ":" + std::to_string(line_no);
    std::stringstream ss(line);
    std::string f_k, f_s, f_cells, f_prompt, f_targets;
    require(static_cast<bool>(ss >> f_k >> f_s >> f_cells >> f_prompt >> f_targets),
            where + ": expected 5 fields");
    TaskSample sample;
    sample.image.k = std::stoi(f_k);
    spec.k = sample.image.k;
    spec.s = std::stoi(f_s);
    sample.image.cells = detail::parse_int_list(f_cells, where + " cells");
    sample.prompt = detail::parse_int_list(f_prompt, where + " prompt");
    sample.targets = detail::parse_int_list(f_targets, where + " targets");
    require(static_cast<int>(sample.image.cells.size()) == sample.image.n_cells(),
            where + ": cell count does not match grid side");
    require(sample.targets.size() == sample.image.cells.size() + 1,
            where + ": target count must be k*k + 1");
    for (int c : sample.image.cells)
      require(c >= 0 && c < spec.s, where + ": cell symbol out of range");
    out.push_back(std::move(sample));
  }
  spec.n_samples = static_cast<int>(out.size());
  if (spec_out) *spec_out = spec;
  return out;
}

}  // namespace vif
