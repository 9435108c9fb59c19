#include "clapkit/datakit.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "clapkit/audio_io.hpp"
#include "clapkit/threading.hpp"

namespace clapkit {

using nlohmann::json;

std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string content_hash_of(const Waveform& canonical) {
  std::vector<std::uint8_t> pcm = canonical_pcm16_bytes(canonical.samples);
  return sha256_hex(pcm.data(), pcm.size());
}

std::string labels_to_caption(const std::vector<std::string>& labels) {
  require(!labels.empty(), "labels_to_caption: no labels");
  std::string out = "The sound of " + labels[0];
  for (std::size_t i = 1; i < labels.size(); ++i) {
    out += ", ";
    if (i + 1 == labels.size()) out += "and ";
    out += labels[i];
  }
  return out;
}

DebiasRules default_debias_rules() {
  return {{"woman", "person"}, {"man", "person"},
          {"women", "people"}, {"men", "people"}};
}

DebiasRules load_debias_rules(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("debias: cannot open rules file " + path);
  DebiasRules rules;
  std::string line;
  while (std::getline(f, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string from, arrow, to;
    if (ss >> from >> arrow >> to && arrow == "->") rules.emplace_back(from, to);
  }
  return rules;
}

std::string debias_caption(const std::string& text, const DebiasRules& rules) {
  std::unordered_map<std::string, std::string> map;
  for (const auto& [from, to] : rules) {
    std::string lower = from;
    for (char& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    map[lower] = to;
  }

  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (!std::isalnum(static_cast<unsigned char>(text[i]))) {
      out.push_back(text[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && std::isalnum(static_cast<unsigned char>(text[j]))) ++j;
    std::string word = text.substr(i, j - i);
    std::string lower = word;
    for (char& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    auto it = map.find(lower);
    if (it == map.end()) {
      out += word;
    } else {
      std::string repl = it->second;
      if (std::isupper(static_cast<unsigned char>(word[0])) && !repl.empty())
        repl[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(repl[0])));
      out += repl;
    }
    i = j;
  }
  return out;
}

std::vector<std::string> effective_captions(const PairRecord& rec) {
  if (!rec.captions.empty()) return rec.captions;
  require(!rec.labels.empty(), "record " + rec.id + " has neither captions nor labels");
  return {labels_to_caption(rec.labels)};
}

std::string keyword_to_caption(const PairRecord& rec,
                               const std::string& generator_cmd,
                               const DebiasRules& rules, std::string* warning) {
  auto fallback = [&] { return debias_caption(labels_to_caption(rec.labels), rules); };
  require(!rec.labels.empty(), "keyword_to_caption: record has no labels");

  // Clips under 2 s match generated captions poorly; keep the template.
  if (rec.duration_s > 0.0 && rec.duration_s < 2.0) return fallback();
  if (generator_cmd.empty()) return fallback();

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path();
  fs::path in_path = dir / ("clapkit_k2c_in_" + std::to_string(::getpid()) + ".txt");
  fs::path out_path = dir / ("clapkit_k2c_out_" + std::to_string(::getpid()) + ".txt");

  {
    std::ofstream in(in_path);
    for (std::size_t i = 0; i < rec.labels.size(); ++i) {
      if (i) in << ",";
      in << rec.labels[i];
    }
    in << "\n";
  }
  std::string cmd = generator_cmd + " < " + in_path.string() + " > " + out_path.string();
  int rc = std::system(cmd.c_str());
  std::string line;
  if (rc == 0) {
    std::ifstream out(out_path);
    std::getline(out, line);
  }
  std::error_code ec;
  fs::remove(in_path, ec);
  fs::remove(out_path, ec);

  if (rc != 0 || line.empty()) {
    if (warning)
      *warning = "keyword-to-caption generator failed for record " + rec.id +
                 " (exit " + std::to_string(rc) + "), using template caption";
    return fallback();
  }
  return debias_caption(line, rules);
}

std::pair<Manifest, OverlapReport> exclude_overlaps(const Manifest& eval_set,
                                                    const Manifest& train_set) {
  std::unordered_map<std::string, std::set<std::string>> train_hashes;
  for (const auto& r : train_set.records) {
    require(!r.content_hash.empty(),
            "exclude_overlaps: train record " + r.id + " has no content_hash");
    train_hashes[r.content_hash].insert(r.source);
  }

  Manifest filtered;
  filtered.name = eval_set.name;
  OverlapReport report;
  for (const auto& r : eval_set.records) {
    require(!r.content_hash.empty(),
            "exclude_overlaps: eval record " + r.id + " has no content_hash");
    auto it = train_hashes.find(r.content_hash);
    if (it == train_hashes.end()) {
      filtered.records.push_back(r);
    } else {
      report.removed_ids.push_back(r.id);
      ++report.removed_total;
      for (const auto& train_source : it->second)
        ++report.pair_counts[{r.source, train_source}];
    }
  }
  return {std::move(filtered), std::move(report)};
}

std::string OverlapReport::to_json() const {
  json j;
  j["removed_total"] = removed_total;
  j["removed_ids"] = removed_ids;
  j["pairs"] = json::array();
  for (const auto& [key, count] : pair_counts)
    j["pairs"].push_back({{"eval_source", key.first},
                          {"train_source", key.second},
                          {"count", count}});
  return j.dump(2);
}

std::string IngestReport::to_json() const {
  json j;
  j["record_errors"] = record_errors;
  return j.dump(2);
}

namespace {

PairRecord record_from_json(const json& j, int lineno) {
  auto bad = [&](const std::string& what) {
    return std::runtime_error("manifest line " + std::to_string(lineno) + ": " + what);
  };
  if (!j.is_object()) throw bad("record is not an object");
  PairRecord r;
  if (!j.contains("id") || !j.at("id").is_string()) throw bad("missing string id");
  r.id = j.at("id").get<std::string>();
  if (!j.contains("audio_path") || !j.at("audio_path").is_string())
    throw bad("missing string audio_path");
  r.audio_path = j.at("audio_path").get<std::string>();
  if (j.contains("captions")) r.captions = j.at("captions").get<std::vector<std::string>>();
  if (j.contains("labels")) r.labels = j.at("labels").get<std::vector<std::string>>();
  if (j.contains("duration_s")) r.duration_s = j.at("duration_s").get<double>();
  if (j.contains("source")) r.source = j.at("source").get<std::string>();
  if (j.contains("content_hash")) r.content_hash = j.at("content_hash").get<std::string>();
  if (r.captions.empty() && r.labels.empty())
    throw bad("record " + r.id + " needs captions or labels");
  return r;
}

json record_to_json(const PairRecord& r) {
  json j;
  j["id"] = r.id;
  j["audio_path"] = r.audio_path;
  j["captions"] = r.captions;
  j["labels"] = r.labels;
  j["duration_s"] = r.duration_s;
  j["source"] = r.source;
  j["content_hash"] = r.content_hash;
  return j;
}

}  // namespace

Manifest ingest(const std::string& path, const DspConfig& dsp,
                IngestReport* report) {
  namespace fs = std::filesystem;
  std::string file = path;
  if (fs::is_directory(path)) file = (fs::path(path) / "manifest.jsonl").string();
  std::ifstream f(file);
  if (!f) throw std::runtime_error("ingest: cannot open " + file);

  Manifest m;
  m.name = fs::path(file).stem().string();
  std::unordered_map<std::string, int> seen_ids;
  std::string line;
  int lineno = 0;
  std::vector<int> record_lines;
  while (std::getline(f, line)) {
    ++lineno;
    std::string trimmed = line;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r"));
    if (trimmed.empty()) continue;
    json j;
    try {
      j = json::parse(trimmed);
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(lineno) +
                               ": malformed JSON (" + e.what() + ")");
    }
    PairRecord r = record_from_json(j, lineno);
    auto [it, inserted] = seen_ids.emplace(r.id, lineno);
    if (!inserted)
      throw std::runtime_error("manifest: duplicate id '" + r.id + "' at lines " +
                               std::to_string(it->second) + " and " +
                               std::to_string(lineno));
    m.records.push_back(std::move(r));
    record_lines.push_back(lineno);
  }

  // Fill missing hashes/durations by decoding; bad audio drops the record.
  fs::path base = fs::path(file).parent_path();
  std::vector<std::string> errors(m.records.size());
  parallel_for(m.records.size(), [&](std::size_t i) {
    PairRecord& r = m.records[i];
    if (!r.content_hash.empty() && r.duration_s > 0.0) return;
    std::string resolved = r.audio_path;
    if (!fs::path(resolved).is_absolute() && !base.empty())
      resolved = (base / resolved).string();
    try {
      Waveform w = load_audio(resolved, dsp);
      if (r.content_hash.empty()) r.content_hash = content_hash_of(w);
      if (r.duration_s <= 0.0) r.duration_s = w.duration_s();
    } catch (const std::exception& e) {
      errors[i] = "record " + r.id + ": " + e.what();
    }
  });

  Manifest ok;
  ok.name = m.name;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (errors[i].empty()) {
      ok.records.push_back(std::move(m.records[i]));
    } else if (report) {
      report->record_errors.push_back(errors[i]);
    }
  }
  return ok;
}

std::string manifest_to_jsonl(const Manifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    out += record_to_json(r).dump();
    out += "\n";
  }
  return out;
}

void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("manifest: cannot write " + path);
  f << manifest_to_jsonl(m);
}

}  // namespace clapkit
