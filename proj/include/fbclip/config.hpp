#pragma once

// Run configuration: every tunable named by a module lives here with its
// published default. Files use dotted `key = value` lines; `#` starts a
// comment. Any CLI flag override is a `key=value` string routed through the
// same registry.

#include <cstdint>
#include <functional>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbclip {

struct RunConfig {
  struct Backbone {
    std::string kind = "synthetic";  // synthetic | clip
    std::string weights_path;        // real weights; resolved under FBCLIP_CACHE when relative
    int patch_grid_side = 6;         // H = W, L = side^2
    int channel_width = 16;          // C
    int text_width = 16;             // D (shared embedding width = text encoder width)
    int depth = 8;                   // synthetic encoder depth
    std::vector<int> tap_layers = {2, 4, 6, 8};
    int image_resolution = 48;       // pixels per side
  } backbone;

  struct Text {
    int context_length = 12;   // E learnable embeddings per prompt
    int selector_hidden = 0;   // 0 = auto (D/4, min 1)
    double lambda_global = 1.0;
    double lambda_attn = 0.5;
    double lambda_eot = 0.5;
  } text;

  struct Mask {
    double alpha_local = 0.3;
    double alpha_center = 0.3;
    double alpha_cls = 0.3;
    double alpha_temp = 0.1;
    double threshold = 0.5;
  } mask;

  struct Mvfbe {
    double sem_alpha = 0.6;
    int spa_kernel = 5;
    int heads = 8;
    std::string views = "id,sem,spa";  // subset selection for ablations
  } mvfbe;

  struct Bs {
    double alpha = 0.5;
    std::string candidate_fraction = "half";  // half | full
    bool sort_by_mask = false;
  } bs;

  struct Scr {
    double tau = 0.07;
    double gamma = 1.0;
    double lambda = 0.15;
    double w_entropy = 1.0;
    double w_margin = 0.5;
    std::string source_group = "id";  // view feeding SCR (deepest tapped layer)
  } scr;

  struct Score {
    double sigma = 4.0;           // gaussian smoothing of the fused map
    double image_blend = 0.5;     // weight of max-of-map vs global probability
    double aupro_fpr_limit = 0.3;
  } score;

  struct Train {
    std::string optimizer = "adam";
    double lr = 5e-5;
    int batch_size = 4;
    int epochs = 5;
    int max_steps = 0;  // 0 = epoch-driven
    double w_image = 1.0;
    double w_pixel = 1.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.75;  // positive-class weight in the focal term
    int ckpt_every = 0;         // steps between periodic checkpoints; 0 = final only
  } train;

  struct Data {
    std::string kind = "synthetic";  // synthetic | mvtec | flat
    std::string root;
    std::string name = "synthetic";
    int synthetic_count = 32;
    int synthetic_test_count = 16;
  } data;

  std::uint64_t seed = 7;

  static RunConfig from_file(const std::string& path);
  void apply(const std::string& key, const std::string& value);
  void apply_line(const std::string& line);  // "key = value"
  std::string snapshot() const;              // full key=value dump, fixed order
  static std::vector<std::string> known_keys();
};

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: not a boolean: " + v);
}

inline std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::vector<ConfigKey>& registry() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> r;
#define FB_KEY_STR(NAME, FIELD)                                               \
  r.push_back({NAME, [](const RunConfig& c) { return c.FIELD; },              \
               [](RunConfig& c, const std::string& v) { c.FIELD = v; }})
#define FB_KEY_INT(NAME, FIELD)                                               \
  r.push_back({NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); }, \
               [](RunConfig& c, const std::string& v) { c.FIELD = std::stoi(v); }})
#define FB_KEY_DBL(NAME, FIELD)                                               \
  r.push_back({NAME, [](const RunConfig& c) { return fmt_double(c.FIELD); },  \
               [](RunConfig& c, const std::string& v) { c.FIELD = std::stod(v); }})
#define FB_KEY_BOOL(NAME, FIELD)                                              \
  r.push_back({NAME, [](const RunConfig& c) { return c.FIELD ? "true" : "false"; }, \
               [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(v); }})

    FB_KEY_STR("backbone.kind", backbone.kind);
    FB_KEY_STR("backbone.weights_path", backbone.weights_path);
    FB_KEY_INT("backbone.patch_grid_side", backbone.patch_grid_side);
    FB_KEY_INT("backbone.channel_width", backbone.channel_width);
    FB_KEY_INT("backbone.text_width", backbone.text_width);
    FB_KEY_INT("backbone.depth", backbone.depth);
    r.push_back({"backbone.tap_layers",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.backbone.tap_layers.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.backbone.tap_layers[i]);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.backbone.tap_layers = parse_int_list(v);
                 }});
    FB_KEY_INT("backbone.image_resolution", backbone.image_resolution);

    FB_KEY_INT("text.context_length", text.context_length);
    FB_KEY_INT("text.selector_hidden", text.selector_hidden);
    FB_KEY_DBL("text.lambda_global", text.lambda_global);
    FB_KEY_DBL("text.lambda_attn", text.lambda_attn);
    FB_KEY_DBL("text.lambda_eot", text.lambda_eot);

    FB_KEY_DBL("mask.alpha_local", mask.alpha_local);
    FB_KEY_DBL("mask.alpha_center", mask.alpha_center);
    FB_KEY_DBL("mask.alpha_cls", mask.alpha_cls);
    FB_KEY_DBL("mask.alpha_temp", mask.alpha_temp);
    FB_KEY_DBL("mask.threshold", mask.threshold);

    FB_KEY_DBL("mvfbe.sem_alpha", mvfbe.sem_alpha);
    FB_KEY_INT("mvfbe.spa_kernel", mvfbe.spa_kernel);
    FB_KEY_INT("mvfbe.heads", mvfbe.heads);
    FB_KEY_STR("mvfbe.views", mvfbe.views);

    FB_KEY_DBL("bs.alpha", bs.alpha);
    FB_KEY_STR("bs.candidate_fraction", bs.candidate_fraction);
    FB_KEY_BOOL("bs.sort_by_mask", bs.sort_by_mask);

    FB_KEY_DBL("scr.tau", scr.tau);
    FB_KEY_DBL("scr.gamma", scr.gamma);
    FB_KEY_DBL("scr.lambda", scr.lambda);
    FB_KEY_DBL("scr.w_entropy", scr.w_entropy);
    FB_KEY_DBL("scr.w_margin", scr.w_margin);
    FB_KEY_STR("scr.source_group", scr.source_group);

    FB_KEY_DBL("score.sigma", score.sigma);
    FB_KEY_DBL("score.image_blend", score.image_blend);
    FB_KEY_DBL("score.aupro_fpr_limit", score.aupro_fpr_limit);

    FB_KEY_STR("train.optimizer", train.optimizer);
    FB_KEY_DBL("train.lr", train.lr);
    FB_KEY_INT("train.batch_size", train.batch_size);
    FB_KEY_INT("train.epochs", train.epochs);
    FB_KEY_INT("train.max_steps", train.max_steps);
    FB_KEY_DBL("train.w_image", train.w_image);
    FB_KEY_DBL("train.w_pixel", train.w_pixel);
    FB_KEY_DBL("train.focal_gamma", train.focal_gamma);
    FB_KEY_DBL("train.focal_alpha", train.focal_alpha);
    FB_KEY_INT("train.ckpt_every", train.ckpt_every);

    FB_KEY_STR("data.kind", data.kind);
    FB_KEY_STR("data.root", data.root);
    FB_KEY_STR("data.name", data.name);
    FB_KEY_INT("data.synthetic_count", data.synthetic_count);
    FB_KEY_INT("data.synthetic_test_count", data.synthetic_test_count);

    r.push_back({"seed",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); }});
#undef FB_KEY_STR
#undef FB_KEY_INT
#undef FB_KEY_DBL
#undef FB_KEY_BOOL
    return r;
  }();
  return keys;
}

}  // namespace detail

inline void RunConfig::apply(const std::string& key, const std::string& value) {
  for (const auto& k : detail::registry()) {
    if (k.name == key) {
      k.set(*this, detail::trim(value));
      return;
    }
  }
  throw std::invalid_argument("config: unknown key: " + key);
}

inline void RunConfig::apply_line(const std::string& line) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("config: expected key = value: " + line);
  apply(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
}

inline RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    cfg.apply_line(line);
  }
  return cfg;
}

inline std::string RunConfig::snapshot() const {
  std::string out;
  for (const auto& k : detail::registry()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

inline std::vector<std::string> RunConfig::known_keys() {
  std::vector<std::string> names;
  for (const auto& k : detail::registry()) names.push_back(k.name);
  return names;
}

}  // namespace fbclip
