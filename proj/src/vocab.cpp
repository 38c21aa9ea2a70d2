#include "labpred/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace labpred {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    ids_.reserve(tokens_.size());
    for (size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<int32_t>(i)).second)
            throw std::invalid_argument("duplicate vocabulary token \"" + tokens_[i] + "\"");
    }
    if (tokens_.size() < 3 || tokens_[kPadId] != kPadToken || tokens_[kEoeId] != kEoeToken ||
        tokens_[kUnkId] != kUnkToken)
        throw std::invalid_argument("vocabulary must start with the reserved sentinel tokens");
}

Vocabulary Vocabulary::build(const std::vector<SequenceRecord>& corpus) {
    std::vector<std::string> tokens = special_tokens();
    std::unordered_set<std::string> present(tokens.begin(), tokens.end());
    // Value characters are always representable, even when the corpus happens
    // to miss a digit, so numeric generation never depends on data luck.
    for (const char* c : {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-"}) {
        tokens.push_back(c);
        present.insert(c);
    }

    std::unordered_map<std::string, long> freq;
    for (const SequenceRecord& rec : corpus)
        for (const std::string& t : rec.tokens)
            if (!present.contains(t)) ++freq[t];

    std::vector<std::pair<std::string, long>> words(freq.begin(), freq.end());
    std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (auto& [word, count] : words) tokens.push_back(std::move(word));
    return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::stringstream buf;
    buf << in.rdbuf();
    return from_serialized(buf.str());
}

Vocabulary Vocabulary::from_serialized(const std::string& text) {
    std::vector<std::string> tokens;
    size_t begin = 0;
    while (begin < text.size()) {
        size_t end = text.find('\n', begin);
        if (end == std::string::npos) end = text.size();
        tokens.push_back(text.substr(begin, end - begin));
        begin = end + 1;
    }
    return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << serialize();
    if (!out) throw std::runtime_error(path + ": write failed");
}

std::string Vocabulary::serialize() const {
    std::string out;
    for (const std::string& t : tokens_) {
        out += t;
        out += '\n';
    }
    return out;
}

int32_t Vocabulary::id_of(const std::string& token) const {
    auto found = ids_.find(token);
    return found == ids_.end() ? kUnkId : found->second;
}

const std::string& Vocabulary::token_of(int32_t id) const {
    if (id < 0 || id >= size())
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(size()));
    return tokens_[static_cast<size_t>(id)];
}

std::vector<int32_t> Vocabulary::encode(std::span<const std::string> tokens) const {
    std::vector<int32_t> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(id_of(t));
    return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int32_t> ids) const {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int32_t id : ids) tokens.push_back(token_of(id));
    return tokens;
}

}  // namespace labpred
