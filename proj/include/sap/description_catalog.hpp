#pragma once

// Class descriptions: loading, normalization, the deduplicated description
// union, text templates, and the cached LLM query path.

#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sap/hashing.hpp"

namespace sap {

class CatalogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProviderError : public std::runtime_error {
 public:
  ProviderError(std::string class_name, const std::string &what)
      : std::runtime_error(what), class_name_(std::move(class_name)) {}
  const std::string &class_name() const { return class_name_; }

 private:
  std::string class_name_;
};

// Trims and collapses runs of whitespace to a single space. This is the
// dedup key for descriptions (case-sensitive).
inline std::string normalize_description(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(ch);
  }
  return out;
}

struct ClassEntry {
  std::string class_name;
  std::vector<std::string> descriptions;
};

class DescriptionCatalog {
 public:
  DescriptionCatalog() : DescriptionCatalog("", {}) {}

  // Normalizes descriptions, drops empties and intra-class duplicates, and
  // rebuilds the union in first-occurrence order. Throws on duplicate class.
  DescriptionCatalog(std::string dataset_id, std::vector<ClassEntry> entries) : dataset_id_(std::move(dataset_id)) {
    std::unordered_map<std::string, std::size_t> union_pos;
    for (auto &entry : entries) {
      if (position_.count(entry.class_name))
        throw CatalogError("duplicate class name in catalog: '" + entry.class_name + "'");
      ClassEntry clean{entry.class_name, {}};
      std::vector<std::size_t> indices;
      std::set<std::string> seen;
      for (const auto &raw : entry.descriptions) {
        std::string d = normalize_description(raw);
        if (d.empty() || !seen.insert(d).second) continue;
        auto [it, inserted] = union_pos.emplace(d, union_.size());
        if (inserted) union_.push_back(d);
        indices.push_back(it->second);
        clean.descriptions.push_back(std::move(d));
      }
      position_.emplace(clean.class_name, entries_.size());
      class_index_map_.emplace(clean.class_name, std::move(indices));
      entries_.push_back(std::move(clean));
    }
    hash_ = sha256_hex(to_json_string());
  }

  const std::string &dataset_id() const { return dataset_id_; }
  const std::vector<ClassEntry> &entries() const { return entries_; }
  const std::vector<std::string> &union_descriptions() const { return union_; }
  std::size_t size() const { return union_.size(); }  // N
  bool contains(const std::string &class_name) const { return position_.count(class_name) != 0; }

  // Descriptions of a class; empty for classes the catalog does not know.
  const std::vector<std::string> &descriptions(const std::string &class_name) const {
    static const std::vector<std::string> kEmpty;
    auto it = position_.find(class_name);
    return it == position_.end() ? kEmpty : entries_[it->second].descriptions;
  }

  const std::vector<std::size_t> &indices(const std::string &class_name) const {
    static const std::vector<std::size_t> kEmpty;
    auto it = class_index_map_.find(class_name);
    return it == class_index_map_.end() ? kEmpty : it->second;
  }

  const std::map<std::string, std::vector<std::size_t>> &class_index_map() const { return class_index_map_; }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto &e : entries_) out.push_back(e.class_name);
    return out;
  }

  // Union of the descriptions of the given classes, in first-occurrence order.
  std::vector<std::string> union_over(const std::vector<std::string> &label_space) const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto &y : label_space)
      for (const auto &d : descriptions(y))
        if (seen.insert(d).second) out.push_back(d);
    return out;
  }

  // Digest of the canonical serialization.
  const std::string &content_hash() const { return hash_; }

  // Canonical form: top-level keys sorted, classes in catalog order, two-space
  // indentation, trailing newline.
  std::string to_json_string() const {
    nlohmann::ordered_json classes = nlohmann::ordered_json::object();
    for (const auto &e : entries_) classes[e.class_name] = e.descriptions;
    nlohmann::ordered_json root = nlohmann::ordered_json::object();
    root["classes"] = std::move(classes);
    root["dataset"] = dataset_id_;
    return root.dump(2) + "\n";
  }

  static DescriptionCatalog from_json_string(const std::string &text) {
    // Class names are keys at depth 2; collect them to catch duplicates, which
    // a DOM parse would otherwise silently merge.
    std::optional<std::string> duplicate;
    std::set<std::string> seen;
    nlohmann::ordered_json::parser_callback_t cb = [&](int d, nlohmann::ordered_json::parse_event_t ev,
                                                       nlohmann::ordered_json &parsed) {
      if (ev == nlohmann::ordered_json::parse_event_t::key && d == 2) {
        const auto key = parsed.get<std::string>();
        if (!seen.insert(key).second && !duplicate) duplicate = key;
      }
      return true;
    };
    nlohmann::ordered_json root;
    try {
      root = nlohmann::ordered_json::parse(text, cb);
    } catch (const nlohmann::json::parse_error &e) {
      throw CatalogError(std::string("malformed catalog JSON: ") + e.what());
    }
    if (duplicate) throw CatalogError("duplicate class name in catalog: '" + *duplicate + "'");
    if (!root.is_object() || !root.contains("classes") || !root["classes"].is_object())
      throw CatalogError("catalog JSON must be an object with a 'classes' object");
    std::string dataset;
    if (root.contains("dataset")) {
      if (!root["dataset"].is_string()) throw CatalogError("catalog 'dataset' must be a string");
      dataset = root["dataset"].get<std::string>();
    }
    std::vector<ClassEntry> entries;
    for (const auto &[name, list] : root["classes"].items()) {
      if (!list.is_array()) throw CatalogError("descriptions of class '" + name + "' must be an array");
      ClassEntry entry{name, {}};
      for (const auto &d : list) {
        if (!d.is_string()) throw CatalogError("descriptions of class '" + name + "' must be strings");
        entry.descriptions.push_back(d.get<std::string>());
      }
      entries.push_back(std::move(entry));
    }
    return DescriptionCatalog(std::move(dataset), std::move(entries));
  }

 private:
  std::string dataset_id_;
  std::vector<ClassEntry> entries_;
  std::unordered_map<std::string, std::size_t> position_;
  std::map<std::string, std::vector<std::size_t>> class_index_map_;
  std::vector<std::string> union_;
  std::string hash_;
};

inline DescriptionCatalog load_catalog(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CatalogError("cannot open catalog file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return DescriptionCatalog::from_json_string(buf.str());
}

inline void save_catalog(const DescriptionCatalog &catalog, const std::filesystem::path &path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CatalogError("cannot write catalog file: " + path.string());
  out << catalog.to_json_string();
}

// ---------------------------------------------------------------------------
// Templates

struct PromptTemplate {
  std::string base_pattern = "a photo of a {class}";
  std::string description_joiner = ", which {description}";

  static constexpr std::string_view kClassSlot = "{class}";
  static constexpr std::string_view kDescriptionSlot = "{description}";

  void validate() const {
    if (count(base_pattern, kClassSlot) != 1)
      throw std::invalid_argument("template base pattern needs exactly one {class} slot: " + base_pattern);
    if (count(description_joiner, kDescriptionSlot) != 1)
      throw std::invalid_argument("template joiner needs exactly one {description} slot: " + description_joiner);
  }

  // Fills the class slot. An article "a" directly before the slot becomes
  // "an" when the class name starts with a vowel.
  std::string render_base(const std::string &class_name) const {
    validate();
    const auto pos = base_pattern.find(kClassSlot);
    std::string prefix = base_pattern.substr(0, pos);
    const std::string suffix = base_pattern.substr(pos + kClassSlot.size());
    const bool article_a = prefix == "a " || (prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, " a ") == 0);
    if (article_a && starts_with_vowel(class_name)) prefix.insert(prefix.size() - 1, "n");
    return prefix + class_name + suffix;
  }

  std::string render_joiner(const std::string &description) const {
    const auto pos = description_joiner.find(kDescriptionSlot);
    return description_joiner.substr(0, pos) + description +
           description_joiner.substr(pos + kDescriptionSlot.size());
  }

 private:
  static std::size_t count(const std::string &s, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
    return n;
  }

  static bool starts_with_vowel(const std::string &word) {
    if (word.empty()) return false;
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(word.front())));
    return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u';
  }
};

// One description-guided template per description; the plain template when
// there are none.
inline std::vector<std::string> compose_class_templates(const std::string &class_name,
                                                        const std::vector<std::string> &descriptions,
                                                        const PromptTemplate &tmpl = {}) {
  const std::string base = tmpl.render_base(class_name);
  if (descriptions.empty()) return {base};
  std::vector<std::string> out;
  out.reserve(descriptions.size());
  for (const auto &d : descriptions) out.push_back(base + tmpl.render_joiner(d));
  return out;
}

inline constexpr std::string_view kOutOfVocabularyName = "object";

// Same as compose_class_templates with the class name hidden.
inline std::vector<std::string> compose_ovc_templates(const std::vector<std::string> &descriptions,
                                                      const PromptTemplate &tmpl = {}) {
  return compose_class_templates(std::string(kOutOfVocabularyName), descriptions, tmpl);
}

// A single template carrying every description at once.
inline std::string compose_aggregated_template(const std::string &class_name,
                                               const std::vector<std::string> &descriptions,
                                               const PromptTemplate &tmpl = {}) {
  const std::string base = tmpl.render_base(class_name);
  if (descriptions.empty()) return base;
  std::string joined;
  for (std::size_t i = 0; i < descriptions.size(); ++i) {
    if (i) joined += ", ";
    joined += descriptions[i];
  }
  return base + tmpl.render_joiner(joined);
}

// ---------------------------------------------------------------------------
// LLM query and cache

inline std::string description_query(const std::string &class_name) {
  return "What are useful visual features for distinguishing a " + class_name + " in a photo? Answer concisely.";
}

// Splits a list-style answer into descriptions. Each non-empty line becomes
// one entry with any leading "1.", "2)", "-", "*" or bullet marker removed.
inline std::vector<std::string> parse_description_list(const std::string &response) {
  static const std::regex kPrefix(R"(^\s*(?:\d+\s*[.):]|[-*•]|\xE2\x80\xA2)\s*)");
  std::vector<std::string> out;
  std::istringstream in(response);
  std::string line;
  while (std::getline(in, line)) {
    std::string stripped = std::regex_replace(line, kPrefix, "", std::regex_constants::format_first_only);
    stripped = normalize_description(stripped);
    if (!stripped.empty()) out.push_back(std::move(stripped));
  }
  return out;
}

// Anything that can answer a free-form text query.
class DescriptionProvider {
 public:
  virtual ~DescriptionProvider() = default;
  virtual std::string complete(const std::string &query) = 0;
};

inline std::filesystem::path description_cache_path(const std::filesystem::path &cache_dir, const std::string &dataset_id,
                                                     const std::string &class_name) {
  return cache_dir / dataset_id / (sha256_hex(class_name) + ".json");
}

namespace detail {
inline std::mutex &cache_write_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Returns the descriptions of one class, from the cache when present,
// otherwise by querying the provider and caching the parsed answer. Answers
// are kept verbatim apart from list parsing.
inline std::vector<std::string> fetch_descriptions(const std::string &dataset_id, const std::string &class_name,
                                                   DescriptionProvider *provider,
                                                   const std::filesystem::path &cache_dir) {
  const auto path = description_cache_path(cache_dir, dataset_id, class_name);
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.at("class_name").get<std::string>() == class_name)
        return j.at("descriptions").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception &) {
      // unreadable entry: fall through and refetch
    }
  }
  if (provider == nullptr)
    throw ProviderError(class_name, "no cached descriptions for class '" + class_name + "' and no provider configured");

  std::string response;
  try {
    response = provider->complete(description_query(class_name));
  } catch (const std::exception &e) {
    throw ProviderError(class_name, "description query failed for class '" + class_name + "': " + e.what());
  }
  auto descriptions = parse_description_list(response);

  nlohmann::json entry = {{"class_name", class_name},
                          {"dataset", dataset_id},
                          {"descriptions", descriptions},
                          {"query", description_query(class_name)},
                          {"response", response}};
  std::lock_guard<std::mutex> lock(detail::cache_write_mutex());
  std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << entry.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
  return descriptions;
}

}  // namespace sap
