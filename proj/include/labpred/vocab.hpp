#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "labpred/rng.hpp"
#include "labpred/textualize.hpp"

namespace labpred {

// Token/id mapping. Ids are dense and stable: every special token first (in
// the fixed order of special_tokens()), then the value characters
// 0-9 '.' '-', then corpus words by descending frequency with lexicographic
// tie-breaks. Unknown tokens encode to [UNK].
class Vocabulary {
public:
    static constexpr int32_t kPadId = 0;
    static constexpr int32_t kEoeId = 1;
    static constexpr int32_t kUnkId = 2;

    Vocabulary() = default;

    static Vocabulary build(const std::vector<SequenceRecord>& corpus);

    // One token per line; line number (0-based) is the id.
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;
    std::string serialize() const;
    static Vocabulary from_serialized(const std::string& text);

    // FNV-1a over the serialized form; checkpoints pin this so a model is
    // never run against a different token table.
    uint64_t hash() const { return fnv1a64(serialize()); }

    int32_t size() const { return static_cast<int32_t>(tokens_.size()); }
    bool contains(const std::string& token) const { return ids_.contains(token); }
    int32_t id_of(const std::string& token) const;  // kUnkId when absent
    const std::string& token_of(int32_t id) const;  // throws std::out_of_range

    std::vector<int32_t> encode(std::span<const std::string> tokens) const;
    std::vector<std::string> decode(std::span<const int32_t> ids) const;

private:
    explicit Vocabulary(std::vector<std::string> tokens);
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int32_t> ids_;
};

}  // namespace labpred
