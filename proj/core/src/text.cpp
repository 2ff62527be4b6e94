#include "shield/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "shield/errors.hpp"

namespace shield {

namespace {

bool is_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

std::string clean_token(const std::string& raw) {
  size_t begin = 0, end = raw.size();
  while (begin < end && is_punct(raw[begin])) ++begin;
  while (end > begin && is_punct(raw[end - 1])) --end;
  std::string out = raw.substr(begin, end - begin);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// One logical CSV record, honoring quoted fields that may span lines.
// Returns false at end of stream.
bool read_record(std::istream& in, std::vector<std::string>& fields, bool& parse_ok) {
  fields.clear();
  parse_ok = true;
  int c = in.get();
  if (c == EOF) return false;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  while (true) {
    any = true;
    if (in_quotes) {
      if (c == EOF) {
        parse_ok = false;  // unterminated quote
        break;
      }
      if (c == '"') {
        const int nxt = in.peek();
        if (nxt == '"') {
          field.push_back('"');
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(static_cast<char>(c));
      }
    } else {
      if (c == EOF || c == '\n') {
        break;
      } else if (c == '\r') {
        if (in.peek() == '\n') in.get();
        break;
      } else if (c == '"' && field.empty()) {
        in_quotes = true;
      } else if (c == ',') {
        fields.push_back(field);
        field.clear();
      } else {
        field.push_back(static_cast<char>(c));
      }
    }
    c = in.get();
  }
  fields.push_back(field);
  return any;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>", "<unk>"};
  token_to_id_["<pad>"] = kPad;
  token_to_id_["<unk>"] = kUnk;
}

size_t Vocabulary::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const size_t new_id = id_to_token_.size();
  token_to_id_.emplace(token, new_id);
  id_to_token_.push_back(token);
  return new_id;
}

size_t Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(size_t id) const {
  if (id >= id_to_token_.size())
    throw ConfigError("vocabulary: id " + std::to_string(id) + " out of range (size " +
                      std::to_string(id_to_token_.size()) + ")");
  return id_to_token_[id];
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string raw;
  while (in >> raw) {
    std::string tok = clean_token(raw);
    if (!tok.empty()) out.push_back(std::move(tok));
  }
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& texts) {
  if (texts.empty()) throw ConfigError("build_vocab: empty corpus");
  Vocabulary vocab;
  for (const std::string& text : texts)
    for (const std::string& tok : tokenize(text)) vocab.add(tok);
  return vocab;
}

void Dataset::numberize(const Vocabulary& vocab) {
  for (Example& ex : examples) {
    ex.ids.clear();
    const size_t n = std::min(ex.tokens.size(), kMaxSequenceLength);
    ex.ids.reserve(n);
    for (size_t i = 0; i < n; ++i) ex.ids.push_back(vocab.id(ex.tokens[i]));
  }
}

std::vector<size_t> Dataset::labels() const {
  std::vector<size_t> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) out.push_back(ex.label);
  return out;
}

Dataset load_csv(const std::string& path, const std::string& text_column,
                 const std::string& label_column) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_csv: cannot open " + path);

  std::vector<std::string> fields;
  bool ok = false;
  if (!read_record(in, fields, ok) || !ok)
    throw ConfigError("load_csv: " + path + " is empty or has a bad header");

  size_t text_idx = fields.size(), label_idx = fields.size();
  for (size_t i = 0; i < fields.size(); ++i) {
    if (fields[i] == text_column) text_idx = i;
    if (fields[i] == label_column) label_idx = i;
  }
  if (text_idx == fields.size())
    throw ConfigError("load_csv: missing column '" + text_column + "' in " + path);
  if (label_idx == fields.size())
    throw ConfigError("load_csv: missing column '" + label_column + "' in " + path);
  const size_t ncols = fields.size();

  std::vector<std::pair<std::vector<std::string>, std::string>> rows;
  size_t row_no = 1;  // header was row 1
  while (read_record(in, fields, ok)) {
    ++row_no;
    if (fields.size() == 1 && fields[0].empty()) continue;  // trailing blank line
    if (!ok || fields.size() != ncols)
      throw ConfigError("load_csv: row " + std::to_string(row_no) + " of " + path +
                        " has " + std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(ncols));
    std::vector<std::string> toks = tokenize(fields[text_idx]);
    if (toks.empty())
      throw ConfigError("load_csv: row " + std::to_string(row_no) + " of " + path +
                        " has empty text");
    if (fields[label_idx].empty())
      throw ConfigError("load_csv: row " + std::to_string(row_no) + " of " + path +
                        " has empty label");
    rows.emplace_back(std::move(toks), fields[label_idx]);
  }
  if (rows.empty()) throw ConfigError("load_csv: " + path + " has no data rows");

  std::map<std::string, size_t> label_ids;  // ordered: sorted label strings
  for (const auto& [toks, label] : rows) label_ids[label] = 0;
  Dataset data;
  for (auto& [label, id] : label_ids) {
    id = data.label_names.size();
    data.label_names.push_back(label);
  }
  data.num_classes = data.label_names.size();
  data.examples.reserve(rows.size());
  for (auto& [toks, label] : rows) {
    Example ex;
    ex.tokens = std::move(toks);
    ex.label = label_ids[label];
    data.examples.push_back(std::move(ex));
  }
  return data;
}

void save_csv(const Dataset& data, const std::string& path,
              const std::string& text_column, const std::string& label_column) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_csv: cannot open " + path + " for writing");
  out << quote_csv(text_column) << "," << quote_csv(label_column) << "\n";
  for (const Example& ex : data.examples) {
    std::string joined;
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) joined += " ";
      joined += ex.tokens[i];
    }
    if (ex.label >= data.label_names.size())
      throw ConfigError("save_csv: label id " + std::to_string(ex.label) +
                        " has no label name");
    out << quote_csv(joined) << "," << quote_csv(data.label_names[ex.label]) << "\n";
  }
  if (!out) throw IoError("save_csv: write failed for " + path);
}

}  // namespace shield
