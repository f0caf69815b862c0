#include "icl/tasks.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace icl {

// ---- roles ------------------------------------------------------------

std::string role_to_string(const PositionRole& r) {
  switch (r.kind) {
    case RoleKind::bos: return "bos";
    case RoleKind::pad: return "pad";
    case RoleKind::x: return "x" + std::to_string(r.index);
    case RoleKind::t: return "t" + std::to_string(r.index);
    case RoleKind::y: return "y" + std::to_string(r.index);
    case RoleKind::n: return "n" + std::to_string(r.index);
  }
  return "?";
}

PositionRole role_from_string(const std::string& s) {
  if (s == "bos") return role_bos();
  if (s == "pad") return {RoleKind::pad, 0};
  if (s.empty()) throw std::invalid_argument("role_from_string: empty");
  int idx = std::stoi(s.substr(1));
  switch (s[0]) {
    case 'x': return role_x(idx);
    case 't': return role_t(idx);
    case 'y': return role_y(idx);
    case 'n': return role_n(idx);
  }
  throw std::invalid_argument("role_from_string: bad role " + s);
}

// ---- vocabulary -------------------------------------------------------

std::string token_to_string(int tok) {
  switch (tok) {
    case kTokBos: return "<bos>";
    case kTokTab: return "\\t";
    case kTokNl: return "\\n";
    case kTokPad: return "<pad>";
    default: return "w" + std::to_string(tok - kFirstWord);
  }
}

namespace {

Word single(int word_index) { return Word{{kFirstWord + word_index}}; }

std::vector<Word> word_range(int lo, int hi) {
  std::vector<Word> out;
  for (int i = lo; i < hi; ++i) out.push_back(single(i));
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  return idx;
}

void make_splits(TaskDefinition& t, std::uint64_t seed, std::size_t test_size = 16) {
  RngStream rng(seed, "split:" + t.name);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < t.input_space.size(); ++i) pool.push_back(i);
  rng.shuffle(pool);
  // test queries avoid ambiguous inputs so evaluation targets are unique
  std::vector<std::size_t> test, train;
  for (std::size_t i : pool) {
    bool amb = std::find(t.ambiguous_x.begin(), t.ambiguous_x.end(), i) !=
               t.ambiguous_x.end();
    if (test.size() < test_size && !amb)
      test.push_back(i);
    else
      train.push_back(i);
  }
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  t.train_x = std::move(train);
  t.test_x = std::move(test);
}

}  // namespace

bool TaskDefinition::in_input_space(const Word& w) const {
  return std::find(input_space.begin(), input_space.end(), w) != input_space.end();
}
bool TaskDefinition::in_output_space(const Word& w) const {
  return std::find(output_space.begin(), output_space.end(), w) != output_space.end();
}
bool TaskDefinition::satisfies_f(const Word& x, const Word& y) const {
  auto it = std::find(input_space.begin(), input_space.end(), x);
  if (it == input_space.end()) return false;
  return output_space[f()[it - input_space.begin()]] == y;
}

std::vector<TaskDefinition> make_synthetic_tasks(std::uint64_t seed) {
  std::vector<TaskDefinition> tasks;

  {  // Copy: f = identity on a shared space
    TaskDefinition t;
    t.name = "copy";
    t.input_space = word_range(0, 64);
    t.output_space = t.input_space;
    std::vector<int> f(64);
    for (int i = 0; i < 64; ++i) f[i] = i;
    t.f_family = {f};
    t.spaces_disjoint = false;
    make_splits(t, seed);
    tasks.push_back(std::move(t));
  }

  {  // Lookup: family of bijections between disjoint spaces
    TaskDefinition t;
    t.name = "lookup";
    t.input_space = word_range(64, 128);
    t.output_space = word_range(128, 192);
    for (int k = 0; k < 4; ++k) {
      RngStream rng(seed, "lookup-bijection", k);
      auto perm = shuffled_indices(64, rng);
      std::vector<int> f(perm.begin(), perm.end());
      t.f_family.push_back(std::move(f));
    }
    t.spaces_disjoint = true;
    make_splits(t, seed);
    tasks.push_back(std::move(t));
  }

  {  // Transform: fixed pairing with a marked variant
    TaskDefinition t;
    t.name = "transform";
    t.input_space = word_range(192, 256);
    t.output_space = word_range(256, 320);
    RngStream rng(seed, "transform-pairing");
    auto perm = shuffled_indices(64, rng);
    std::vector<int> f(perm.begin(), perm.end());
    t.f_family = {f};
    t.spaces_disjoint = true;
    make_splits(t, seed);
    tasks.push_back(std::move(t));
  }

  {  // Categorize: family of many-to-4 maps, each class with >=2 preimages
    TaskDefinition t;
    t.name = "categorize";
    t.input_space = word_range(320, 384);
    t.output_space = word_range(384, 388);
    for (int k = 0; k < 4; ++k) {
      RngStream rng(seed, "categorize-map", k);
      std::vector<int> f(64);
      for (int i = 0; i < 64; ++i) f[i] = i % 4;  // balanced
      rng.shuffle(f);
      t.f_family.push_back(std::move(f));
    }
    t.spaces_disjoint = true;
    make_splits(t, seed);
    tasks.push_back(std::move(t));
  }

  {  // Affix: paired affixed-form tokens; an ambiguous sub-lexicon maps to itself
    TaskDefinition t;
    t.name = "affix";
    t.input_space = word_range(388, 452);
    RngStream rng(seed, "affix-ambiguous");
    auto order = shuffled_indices(64, rng);
    std::vector<std::size_t> ambiguous(order.begin(), order.begin() + 20);
    std::sort(ambiguous.begin(), ambiguous.end());
    std::vector<int> f(64, -1);
    t.output_space.clear();
    int next_affixed = 452;
    for (std::size_t i = 0; i < 64; ++i) {
      bool amb = std::find(ambiguous.begin(), ambiguous.end(), i) != ambiguous.end();
      Word y = amb ? t.input_space[i] : single(next_affixed++);
      t.output_space.push_back(y);
      f[i] = static_cast<int>(i);  // output_space is index-aligned with inputs
    }
    t.f_family = {f};
    t.spaces_disjoint = false;
    t.ambiguous_x = std::move(ambiguous);
    make_splits(t, seed);
    tasks.push_back(std::move(t));
  }

  return tasks;
}

TaskDefinition make_multitoken_task(std::uint64_t seed) {
  // Lookup between 2-3 token words; exercises whole-span ablation.
  TaskDefinition t;
  t.name = "lookup_multi";
  RngStream rng(seed, "multitoken");
  auto make_words = [&](int lo, int hi, std::size_t count) {
    std::vector<Word> words;
    while (words.size() < count) {
      int len = 2 + static_cast<int>(rng.uniform_int(0, 1));
      Word w;
      for (int j = 0; j < len; ++j)
        w.tokens.push_back(kFirstWord + static_cast<int>(rng.uniform_int(lo, hi - 1)));
      if (std::find(words.begin(), words.end(), w) == words.end())
        words.push_back(std::move(w));
    }
    return words;
  };
  t.input_space = make_words(512, 530, 16);
  t.output_space = make_words(530, 548, 16);
  auto perm = shuffled_indices(16, rng);
  t.f_family = {std::vector<int>(perm.begin(), perm.end())};
  t.spaces_disjoint = true;
  make_splits(t, seed, 4);
  return t;
}

const std::vector<Word>& out_of_space_pool() {
  static const std::vector<Word> pool = [] {
    std::vector<Word> p = word_range(496, 512);
    // multi-token filler for span-matched corruption of multi-token tasks
    RngStream rng(7, "oos-multi");
    for (int i = 0; i < 12; ++i) {
      int len = 2 + (i % 2);
      Word w;
      for (int j = 0; j < len; ++j)
        w.tokens.push_back(kFirstWord + 548 + static_cast<int>(rng.uniform_int(0, 19)));
      p.push_back(std::move(w));
    }
    return p;
  }();
  return pool;
}

// ---- prompt construction ---------------------------------------------

std::pair<std::size_t, std::size_t> PromptInstance::span(const PositionRole& r) const {
  std::size_t start = 0, len = 0;
  bool found = false;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == r) {
      if (!found) {
        start = i;
        found = true;
      }
      ++len;
    } else if (found) {
      break;
    }
  }
  if (!found)
    throw std::invalid_argument("span: role " + role_to_string(r) + " absent");
  return {start, len};
}

bool PromptInstance::has_role(const PositionRole& r) const {
  return std::find(roles.begin(), roles.end(), r) != roles.end();
}

std::vector<PositionRole> PromptInstance::distinct_roles() const {
  std::vector<PositionRole> out;
  for (const auto& r : roles)
    if (out.empty() || out.back() != r) out.push_back(r);
  return out;
}

std::string PromptInstance::render() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    switch (tokens[i]) {
      case kTokBos: break;
      case kTokTab: out += "\t"; break;
      case kTokNl: out += "\n"; break;
      default:
        if (!out.empty() && out.back() != '\t' && out.back() != '\n' &&
            i > 0 && roles[i] != roles[i - 1])
          out += " ";
        out += token_to_string(tokens[i]);
    }
  }
  return out;
}

namespace {

void append_word(PromptInstance& p, const Word& w, PositionRole role) {
  for (int tok : w.tokens) {
    p.tokens.push_back(tok);
    p.roles.push_back(role);
  }
}

void append_tok(PromptInstance& p, int tok, PositionRole role) {
  p.tokens.push_back(tok);
  p.roles.push_back(role);
}

std::vector<std::size_t> sample_without_replacement(const std::vector<std::size_t>& pool,
                                                    std::size_t count, RngStream& rng) {
  if (count > pool.size())
    throw std::runtime_error("sampling: pool smaller than requested shot count");
  std::vector<std::size_t> p = pool;
  rng.shuffle(p);
  p.resize(count);
  return p;
}

}  // namespace

PromptInstance build_prompt(const TaskDefinition& task, int n_shots, RngStream& rng,
                            const PromptOptions& opts) {
  if (n_shots < 0) throw std::invalid_argument("build_prompt: negative shot count");
  if (opts.family >= task.f_family.size())
    throw std::invalid_argument("build_prompt: family index out of range");
  auto shots = sample_without_replacement(task.train_x, n_shots, rng);

  std::size_t query;
  if (opts.forced_query) {
    query = *opts.forced_query;
  } else if (opts.query_from_train) {
    query = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(task.input_space.size()) - 1));
  } else {
    query = task.test_x[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(task.test_x.size()) - 1))];
  }

  PromptInstance p;
  p.task_name = task.name;
  p.n_shots = n_shots;
  append_tok(p, kTokBos, role_bos());
  for (int i = 0; i < n_shots; ++i) {
    append_word(p, task.input_space[shots[i]], role_x(i + 1));
    append_tok(p, kTokTab, role_t(i + 1));
    append_word(p, task.apply(shots[i], opts.family), role_y(i + 1));
    append_tok(p, kTokNl, role_n(i + 1));
  }
  append_word(p, task.input_space[query], role_x(n_shots + 1));
  append_tok(p, kTokTab, role_t(n_shots + 1));
  p.query = task.input_space[query];
  p.target = task.apply(query, opts.family);
  return p;
}

// ---- corruption -------------------------------------------------------

std::string corruption_mode_name(CorruptionMode m) {
  switch (m) {
    case CorruptionMode::full: return "full";
    case CorruptionMode::x_out_of_space: return "x_out_of_space";
    case CorruptionMode::x_in_space: return "x_in_space";
    case CorruptionMode::y_out_of_space: return "y_out_of_space";
    case CorruptionMode::y_in_space: return "y_in_space";
    case CorruptionMode::functional_preserving: return "functional_preserving";
  }
  return "?";
}

namespace {

Word word_at(const PromptInstance& p, const PositionRole& r) {
  auto [start, len] = p.span(r);
  Word w;
  w.tokens.assign(p.tokens.begin() + start, p.tokens.begin() + start + len);
  return w;
}

void replace_span(PromptInstance& p, const PositionRole& r, const Word& w) {
  auto [start, len] = p.span(r);
  if (w.tokens.size() != len)
    throw std::runtime_error("corrupt: replacement token count differs");
  std::copy(w.tokens.begin(), w.tokens.end(), p.tokens.begin() + start);
}

// Random pool member with the required token count, never equal to the query.
Word draw_out_of_space(std::size_t token_count, const Word& query, RngStream& rng) {
  std::vector<const Word*> candidates;
  for (const Word& w : out_of_space_pool())
    if (w.tokens.size() == token_count && !(w == query)) candidates.push_back(&w);
  if (candidates.empty())
    throw std::runtime_error("corrupt: no length-matched out-of-space replacement");
  return *candidates[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
}

Word draw_from(const std::vector<Word>& space, std::size_t token_count,
               const Word& query, const Word& avoid, RngStream& rng) {
  std::vector<const Word*> candidates;
  for (const Word& w : space)
    if (w.tokens.size() == token_count && !(w == query) && !(w == avoid))
      candidates.push_back(&w);
  if (candidates.empty())
    throw std::runtime_error("corrupt: no length-matched in-space replacement");
  return *candidates[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
}

}  // namespace

PromptInstance corrupt(const PromptInstance& prompt, const TaskDefinition& task,
                       const CorruptionSpec& spec, RngStream& rng) {
  PromptInstance out = prompt;
  std::vector<int> scope = spec.scope;
  if (scope.empty())
    for (int i = 1; i <= prompt.n_shots; ++i) scope.push_back(i);

  const Word& query = prompt.query;
  for (int i : scope) {
    if (i < 1 || i > prompt.n_shots)
      throw std::invalid_argument("corrupt: scope index out of range");
    PositionRole rx = role_x(i), ry = role_y(i);
    Word x = word_at(prompt, rx), y = word_at(prompt, ry);
    switch (spec.mode) {
      case CorruptionMode::full:
        replace_span(out, rx, draw_out_of_space(x.tokens.size(), query, rng));
        replace_span(out, ry, draw_out_of_space(y.tokens.size(), query, rng));
        break;
      case CorruptionMode::x_out_of_space:
        replace_span(out, rx, draw_out_of_space(x.tokens.size(), query, rng));
        break;
      case CorruptionMode::x_in_space: {
        // break f against the retained y
        Word xp;
        for (int attempt = 0;; ++attempt) {
          xp = draw_from(task.input_space, x.tokens.size(), query, x, rng);
          if (!task.satisfies_f(xp, y)) break;
          if (attempt > 200)
            throw std::runtime_error("corrupt: cannot break f within input space");
        }
        replace_span(out, rx, xp);
        break;
      }
      case CorruptionMode::y_out_of_space:
        replace_span(out, ry, draw_out_of_space(y.tokens.size(), query, rng));
        break;
      case CorruptionMode::y_in_space: {
        Word yp;
        for (int attempt = 0;; ++attempt) {
          yp = draw_from(task.output_space, y.tokens.size(), query, y, rng);
          if (!task.satisfies_f(x, yp)) break;
          if (attempt > 200)
            throw std::runtime_error("corrupt: cannot break f within output space");
        }
        replace_span(out, ry, yp);
        break;
      }
      case CorruptionMode::functional_preserving: {
        for (int attempt = 0;; ++attempt) {
          Word xp = draw_from(task.input_space, x.tokens.size(), query, x, rng);
          auto it = std::find(task.input_space.begin(), task.input_space.end(), xp);
          const Word& yp = task.output_space[task.f()[it - task.input_space.begin()]];
          if (yp.tokens.size() == y.tokens.size() && !(yp == query)) {
            replace_span(out, rx, xp);
            replace_span(out, ry, yp);
            break;
          }
          if (attempt > 200)
            throw std::runtime_error("corrupt: no length-matched valid pair");
        }
        break;
      }
    }
  }

  if (spec.mode == CorruptionMode::full) {
    PositionRole rq = role_x(prompt.n_shots + 1);
    Word q = word_at(prompt, rq);
    Word nq = draw_out_of_space(q.tokens.size(), query, rng);
    replace_span(out, rq, nq);
    out.query = nq;
  }
  return out;
}

AmbiguityMaskedPrompt build_ambiguous_prompt(const TaskDefinition& affix_task,
                                             int n_shots, int k_ambiguous,
                                             RngStream& rng,
                                             const PromptOptions& opts) {
  if (k_ambiguous > n_shots)
    throw std::invalid_argument("build_ambiguous_prompt: k exceeds shot count");
  if (static_cast<std::size_t>(k_ambiguous) > affix_task.ambiguous_x.size())
    throw std::runtime_error("build_ambiguous_prompt: ambiguous lexicon exhausted");

  // unambiguous candidates from the train split
  std::vector<std::size_t> unamb_pool, amb_pool = affix_task.ambiguous_x;
  for (std::size_t i : affix_task.train_x)
    if (std::find(affix_task.ambiguous_x.begin(), affix_task.ambiguous_x.end(), i) ==
        affix_task.ambiguous_x.end())
      unamb_pool.push_back(i);

  auto amb = sample_without_replacement(amb_pool, k_ambiguous, rng);
  auto unamb = sample_without_replacement(unamb_pool, n_shots - k_ambiguous, rng);

  std::vector<bool> mask(n_shots, false);
  std::vector<std::size_t> positions(n_shots);
  for (int i = 0; i < n_shots; ++i) positions[i] = i;
  rng.shuffle(positions);
  for (int i = 0; i < k_ambiguous; ++i) mask[positions[i]] = true;

  std::size_t query;
  if (opts.forced_query) {
    query = *opts.forced_query;
  } else if (opts.query_from_train) {
    query = unamb_pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(unamb_pool.size()) - 1))];
  } else {
    query = affix_task.test_x[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(affix_task.test_x.size()) - 1))];
  }

  PromptInstance p;
  p.task_name = affix_task.name + "_ambiguous";
  p.n_shots = n_shots;
  append_tok(p, kTokBos, role_bos());
  std::size_t ai = 0, ui = 0;
  for (int i = 0; i < n_shots; ++i) {
    std::size_t xi = mask[i] ? amb[ai++] : unamb[ui++];
    append_word(p, affix_task.input_space[xi], role_x(i + 1));
    append_tok(p, kTokTab, role_t(i + 1));
    append_word(p, affix_task.apply(xi), role_y(i + 1));
    append_tok(p, kTokNl, role_n(i + 1));
  }
  append_word(p, affix_task.input_space[query], role_x(n_shots + 1));
  append_tok(p, kTokTab, role_t(n_shots + 1));
  p.query = affix_task.input_space[query];
  p.target = affix_task.apply(query);
  return {std::move(p), std::move(mask)};
}

RegressionPrompt sample_regression_prompt(int d, int n_shots, RngStream& rng) {
  if (d < 1 || n_shots < 1)
    throw std::invalid_argument("sample_regression_prompt: d and N must be >= 1");
  RegressionPrompt out;
  out.v.resize(d);
  for (double& c : out.v) c = rng.normal();
  for (int i = 0; i < n_shots + 1; ++i) {
    std::vector<double> x(d);
    for (double& c : x) c = rng.normal();
    if (i < n_shots) {
      double y = 0.0;
      for (int j = 0; j < d; ++j) y += out.v[j] * x[j];
      out.ys.push_back(y);
    }
    out.xs.push_back(std::move(x));
  }
  return out;
}

CorruptionMode infer_corruption_mode(const PromptInstance& clean,
                                     const PromptInstance& corrupted,
                                     const TaskDefinition& task) {
  std::map<CorruptionMode, int> votes;
  for (int i = 1; i <= clean.n_shots; ++i) {
    Word cx = word_at(clean, role_x(i)), cy = word_at(clean, role_y(i));
    Word kx = word_at(corrupted, role_x(i)), ky = word_at(corrupted, role_y(i));
    bool xc = !(cx == kx), yc = !(cy == ky);
    if (!xc && !yc) continue;
    bool in_x = task.in_input_space(kx), in_y = task.in_output_space(ky);
    bool sat = task.satisfies_f(kx, ky);
    if (xc && yc && !in_x && !in_y)
      ++votes[CorruptionMode::full];
    else if (xc && yc && in_x && in_y && sat)
      ++votes[CorruptionMode::functional_preserving];
    else if (xc && !yc)
      ++votes[in_x ? CorruptionMode::x_in_space : CorruptionMode::x_out_of_space];
    else if (yc && !xc)
      ++votes[in_y ? CorruptionMode::y_in_space : CorruptionMode::y_out_of_space];
  }
  if (votes.empty())
    throw std::runtime_error("infer_corruption_mode: prompts identical");
  return std::max_element(votes.begin(), votes.end(), [](auto& a, auto& b) {
           return a.second < b.second;
         })->first;
}

// ---- serialization ----------------------------------------------------

namespace {

nlohmann::json words_to_json(const std::vector<Word>& ws) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& w : ws) arr.push_back(w.tokens);
  return arr;
}

std::vector<Word> words_from_json(const nlohmann::json& arr) {
  std::vector<Word> out;
  for (const auto& item : arr) out.push_back(Word{item.get<std::vector<int>>()});
  return out;
}

}  // namespace

std::string tasks_to_jsonl(const std::vector<TaskDefinition>& tasks) {
  std::string out;
  for (const auto& t : tasks) {
    nlohmann::json j;
    j["name"] = t.name;
    j["input_space"] = words_to_json(t.input_space);
    j["output_space"] = words_to_json(t.output_space);
    j["f_family"] = t.f_family;
    j["spaces_disjoint"] = t.spaces_disjoint;
    j["train_x"] = t.train_x;
    j["test_x"] = t.test_x;
    j["ambiguous_x"] = t.ambiguous_x;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<TaskDefinition> tasks_from_jsonl(const std::string& text) {
  std::vector<TaskDefinition> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    TaskDefinition t;
    t.name = j.at("name").get<std::string>();
    t.input_space = words_from_json(j.at("input_space"));
    t.output_space = words_from_json(j.at("output_space"));
    t.f_family = j.at("f_family").get<std::vector<std::vector<int>>>();
    t.spaces_disjoint = j.at("spaces_disjoint").get<bool>();
    t.train_x = j.at("train_x").get<std::vector<std::size_t>>();
    t.test_x = j.at("test_x").get<std::vector<std::size_t>>();
    t.ambiguous_x = j.at("ambiguous_x").get<std::vector<std::size_t>>();
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace icl
