#pragma once

#include <algorithm>
#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "intseq/bigint.hpp"
#include "intseq/rng.hpp"

namespace intseq {

struct SequenceRecord {
    std::string id;                  // A-number, e.g. "A000045"
    std::vector<BigInt> terms;       // source order
    std::set<std::string> keywords;  // lowercase tags
};

struct CorpusSplit {
    std::vector<SequenceRecord> train;
    std::vector<SequenceRecord> validation;
    std::vector<SequenceRecord> test;
    std::uint64_t seed = 0;
};

enum class Bucket { Small, Medium, Large, Huge, Astronomical };

inline const char* bucket_name(Bucket b) {
    switch (b) {
        case Bucket::Small: return "small";
        case Bucket::Medium: return "medium";
        case Bucket::Large: return "large";
        case Bucket::Huge: return "huge";
        case Bucket::Astronomical: return "astronomical";
    }
    return "?";
}

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what),
          line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

inline bool is_valid_id(const std::string& id) {
    if (id.size() < 7 || id.size() > 8 || id[0] != 'A') return false;
    for (std::size_t i = 1; i < id.size(); ++i) {
        if (id[i] < '0' || id[i] > '9') return false;
    }
    return true;
}

// Parses the OEIS "stripped" distribution format:
//   A000045 ,0,1,1,2,3,5,
// Comment lines start with '#'. Keywords are left empty.
inline std::vector<SequenceRecord> parse_stripped(std::istream& in) {
    std::vector<SequenceRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        std::size_t space = line.find(' ');
        if (space == std::string::npos) {
            throw ParseError(lineno, "expected 'Axxxxxx ,terms,'");
        }
        SequenceRecord rec;
        rec.id = line.substr(0, space);
        if (!is_valid_id(rec.id)) {
            throw ParseError(lineno, "bad sequence id '" + rec.id + "'");
        }
        std::string body = line.substr(space + 1);
        if (body.size() < 2 || body.front() != ',' || body.back() != ',') {
            throw ParseError(lineno, "term list must be ',t1,...,tk,'");
        }
        std::size_t pos = 1;
        while (pos < body.size()) {
            std::size_t comma = body.find(',', pos);
            if (comma == std::string::npos) {
                throw ParseError(lineno, "unterminated term list");
            }
            std::string token = body.substr(pos, comma - pos);
            try {
                rec.terms.push_back(parse_bigint(token));
            } catch (const std::invalid_argument&) {
                throw ParseError(lineno, "non-integer term '" + token + "'");
            }
            pos = comma + 1;
        }
        if (rec.terms.empty()) {
            throw ParseError(lineno, "sequence has no terms");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline void serialize_stripped(const std::vector<SequenceRecord>& records,
                               std::ostream& out) {
    for (const auto& rec : records) {
        out << rec.id << " ,";
        for (const auto& t : rec.terms) out << to_string(t) << ',';
        out << '\n';
    }
}

// Keyword file: one line per sequence, "Axxxxxx keyword1,keyword2,...".
// Duplicate id lines are unioned.
inline std::map<std::string, std::set<std::string>> parse_keywords(
    std::istream& in) {
    std::map<std::string, std::set<std::string>> result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        std::size_t space = line.find(' ');
        if (space == std::string::npos) {
            throw ParseError(lineno, "expected 'Axxxxxx kw1,kw2,...'");
        }
        std::string id = line.substr(0, space);
        if (!is_valid_id(id)) {
            throw ParseError(lineno, "bad sequence id '" + id + "'");
        }
        auto& kws = result[id];
        std::string body = line.substr(space + 1);
        std::size_t pos = 0;
        while (pos <= body.size()) {
            std::size_t comma = body.find(',', pos);
            std::string kw = body.substr(
                pos, comma == std::string::npos ? std::string::npos : comma - pos);
            std::transform(kw.begin(), kw.end(), kw.begin(),
                           [](unsigned char c) { return std::tolower(c); });
            if (!kw.empty()) kws.insert(kw);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    return result;
}

inline const std::set<std::string>& excluded_keywords() {
    static const std::set<std::string> tags = {
        "cons", "cofr", "frac", "base", "word", "fini",
        "tabl", "dead", "unkn", "less", "dumb"};
    return tags;
}

// Drops records with fewer than 10 terms or any excluded tag. Records absent
// from the keyword map are kept (exclusion-based filtering). Order preserved.
inline std::vector<SequenceRecord> filter_corpus(
    const std::vector<SequenceRecord>& records,
    const std::map<std::string, std::set<std::string>>& keyword_map) {
    std::vector<SequenceRecord> kept;
    for (const auto& rec : records) {
        if (rec.terms.size() < 10) continue;
        SequenceRecord out = rec;
        auto it = keyword_map.find(rec.id);
        if (it != keyword_map.end()) {
            bool excluded = false;
            for (const auto& kw : it->second) {
                if (excluded_keywords().count(kw)) {
                    excluded = true;
                    break;
                }
            }
            if (excluded) continue;
            out.keywords = it->second;
        }
        kept.push_back(std::move(out));
    }
    return kept;
}

struct SplitRatios {
    unsigned train = 8;
    unsigned validation = 1;
    unsigned test = 1;
};

// Deterministic 8:1:1-style split: records are sorted by id, shuffled with a
// seeded Fisher-Yates, and sliced by floor proportions; the remainder goes to
// train. Identical inputs give byte-identical splits on every platform.
inline CorpusSplit split_corpus(const std::vector<SequenceRecord>& records,
                                std::uint64_t seed,
                                SplitRatios ratios = SplitRatios{}) {
    if (ratios.train == 0 || ratios.validation == 0 || ratios.test == 0) {
        throw std::invalid_argument("split ratios must be positive");
    }
    std::vector<const SequenceRecord*> order;
    order.reserve(records.size());
    for (const auto& r : records) order.push_back(&r);
    std::sort(order.begin(), order.end(),
              [](const SequenceRecord* a, const SequenceRecord* b) {
                  return a->id < b->id;
              });
    SplitMix64 rng = derive_stream(seed, "corpus-split");
    fisher_yates_shuffle(order, rng);

    std::size_t n = order.size();
    std::uint64_t total =
        std::uint64_t(ratios.train) + ratios.validation + ratios.test;
    std::size_t n_val = static_cast<std::size_t>(
        (static_cast<std::uint64_t>(n) * ratios.validation) / total);
    std::size_t n_test = static_cast<std::size_t>(
        (static_cast<std::uint64_t>(n) * ratios.test) / total);
    std::size_t n_train = n - n_val - n_test;

    CorpusSplit split;
    split.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train) {
            split.train.push_back(*order[i]);
        } else if (i < n_train + n_val) {
            split.validation.push_back(*order[i]);
        } else {
            split.test.push_back(*order[i]);
        }
    }
    return split;
}

inline std::vector<BigInt> truncate_prefix(const SequenceRecord& record,
                                           std::size_t max_len = 128) {
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    std::size_t n = std::min(record.terms.size(), max_len);
    return std::vector<BigInt>(record.terms.begin(), record.terms.begin() + n);
}

// Magnitude buckets: Small |x|<1e2, Medium <1e5, Large <1e20, Huge <1e50,
// Astronomical otherwise.
inline Bucket bucket_of(const BigInt& x) {
    static const BigInt b2 = pow10_int(2);
    static const BigInt b5 = pow10_int(5);
    static const BigInt b20 = pow10_int(20);
    static const BigInt b50 = pow10_int(50);
    BigInt a = abs(x);
    if (a < b2) return Bucket::Small;
    if (a < b5) return Bucket::Medium;
    if (a < b20) return Bucket::Large;
    if (a < b50) return Bucket::Huge;
    return Bucket::Astronomical;
}

}  // namespace intseq
