#include "couplet/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "couplet/error.hpp"
#include "couplet/utf8.hpp"

namespace couplet {

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(std::move(line));
    }
    return lines;
}

std::u32string decode_line(const std::string& line, const std::filesystem::path& path, std::size_t index) {
    return utf8::strip_spaces(
        utf8::decode_or_throw(line, path.filename().string() + ":" + std::to_string(index + 1)));
}

void accept(LoadResult& result, std::u32string upper, std::u32string lower, int max_len) {
    const auto n = static_cast<int>(upper.size());
    if (upper.empty() || upper.size() != lower.size() || n > max_len) {
        ++result.dropped;
        return;
    }
    result.pairs.push_back({std::move(upper), std::move(lower)});
}

const char* special_name(int id) {
    static constexpr const char* names[] = {"<pad>", "<s>", "</s>", "<unk>", "<sep>"};
    return names[id];
}

}  // namespace

LoadResult load_couplets(const std::filesystem::path& upper_path, const std::filesystem::path& lower_path,
                         int max_len) {
    const auto uppers = read_lines(upper_path);
    const auto lowers = read_lines(lower_path);
    if (uppers.size() != lowers.size()) {
        throw DataError("line count mismatch: " + upper_path.string() + " has " + std::to_string(uppers.size()) +
                        " lines, " + lower_path.string() + " has " + std::to_string(lowers.size()));
    }
    LoadResult result;
    for (std::size_t i = 0; i < uppers.size(); ++i) {
        accept(result, decode_line(uppers[i], upper_path, i), decode_line(lowers[i], lower_path, i), max_len);
    }
    return result;
}

LoadResult load_couplets_tsv(const std::filesystem::path& path, int max_len) {
    const auto lines = read_lines(path);
    LoadResult result;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto tab = lines[i].find('\t');
        if (tab == std::string::npos) {
            if (utf8::strip_spaces(utf8::decode_or_throw(lines[i], path.string())).empty()) {
                ++result.dropped;
                continue;
            }
            throw DataError(path.filename().string() + ":" + std::to_string(i + 1) + ": expected upper<TAB>lower");
        }
        accept(result, decode_line(lines[i].substr(0, tab), path, i), decode_line(lines[i].substr(tab + 1), path, i),
               max_len);
    }
    return result;
}

Vocab Vocab::build(std::span<const CoupletPair> pairs, int min_freq) {
    if (pairs.empty()) {
        throw Error("build_vocab: empty pair list");
    }
    if (min_freq < 1) {
        throw Error("build_vocab: min_freq must be >= 1");
    }
    std::map<char32_t, long> freq;
    for (const auto& pair : pairs) {
        for (char32_t ch : pair.upper) {
            ++freq[ch];
        }
        for (char32_t ch : pair.lower) {
            ++freq[ch];
        }
    }
    std::vector<std::pair<char32_t, long>> kept;
    for (const auto& [ch, count] : freq) {
        if (count >= min_freq) {
            kept.emplace_back(ch, count);
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<char32_t> content;
    content.reserve(kept.size());
    for (const auto& entry : kept) {
        content.push_back(entry.first);
    }
    return from_tokens(std::move(content));
}

Vocab Vocab::from_tokens(std::vector<char32_t> content) {
    Vocab vocab;
    vocab.chars_ = std::move(content);
    for (std::size_t i = 0; i < vocab.chars_.size(); ++i) {
        const auto [it, inserted] = vocab.index_.emplace(vocab.chars_[i], kNumSpecials + static_cast<int>(i));
        if (!inserted) {
            throw DataError("duplicate vocabulary entry: " + utf8::encode(vocab.chars_[i]));
        }
    }
    return vocab;
}

std::string Vocab::serialize() const {
    std::string out;
    for (int id = 0; id < kNumSpecials; ++id) {
        out += special_name(id);
        out += '\n';
    }
    for (char32_t ch : chars_) {
        out += utf8::encode(ch);
        out += '\n';
    }
    return out;
}

Vocab Vocab::parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<char32_t> content;
    int line_no = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line_no < kNumSpecials) {
            if (line != special_name(line_no)) {
                throw DataError("vocab line " + std::to_string(line_no + 1) + ": expected " + special_name(line_no));
            }
        } else {
            const auto decoded = utf8::decode_or_throw(line, "vocab line " + std::to_string(line_no + 1));
            if (decoded.size() != 1) {
                throw DataError("vocab line " + std::to_string(line_no + 1) + ": expected a single character");
            }
            content.push_back(decoded[0]);
        }
        ++line_no;
    }
    if (line_no < kNumSpecials) {
        throw DataError("vocab file truncated: missing special tokens");
    }
    return from_tokens(std::move(content));
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open vocab " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << serialize();
}

std::uint64_t Vocab::hash() const {
    const auto text = serialize();
    return fnv1a64(text.data(), text.size());
}

int Vocab::id_of(char32_t ch) const {
    const auto it = index_.find(ch);
    return it == index_.end() ? kUnk : it->second;
}

char32_t Vocab::char_of(int id) const {
    if (id < kNumSpecials || id >= size()) {
        throw Error("char_of: id " + std::to_string(id) + " is not a content token");
    }
    return chars_[id - kNumSpecials];
}

std::vector<int> Vocab::encode(std::u32string_view text, bool add_bos_eos) const {
    std::vector<int> ids;
    ids.reserve(text.size() + 2);
    if (add_bos_eos) {
        ids.push_back(kBos);
    }
    for (char32_t ch : text) {
        ids.push_back(id_of(ch));
    }
    if (add_bos_eos) {
        ids.push_back(kEos);
    }
    return ids;
}

std::u32string Vocab::decode(std::span<const int> ids) const {
    std::u32string out;
    for (int id : ids) {
        if (id >= kNumSpecials && id < size()) {
            out.push_back(chars_[id - kNumSpecials]);
        }
    }
    return out;
}

std::vector<EncodedPair> encode_pairs(const Vocab& vocab, std::span<const CoupletPair> pairs) {
    std::vector<EncodedPair> out;
    out.reserve(pairs.size());
    for (const auto& pair : pairs) {
        out.push_back({vocab.encode(pair.upper), vocab.encode(pair.lower)});
    }
    return out;
}

std::span<const int> Batch::upper_row(int b) const {
    return std::span<const int>(upper).subspan(static_cast<std::size_t>(b) * upper_len, upper_length(b));
}

std::span<const int> Batch::lower_row(int b) const {
    return std::span<const int>(lower).subspan(static_cast<std::size_t>(b) * lower_len, lower_length(b));
}

int Batch::upper_length(int b) const {
    int n = 0;
    for (int t = 0; t < upper_len; ++t) {
        n += upper_mask[static_cast<std::size_t>(b) * upper_len + t];
    }
    return n;
}

int Batch::lower_length(int b) const {
    int n = 0;
    for (int t = 0; t < lower_len; ++t) {
        n += lower_mask[static_cast<std::size_t>(b) * lower_len + t];
    }
    return n;
}

std::vector<Batch> batchify(std::span<const EncodedPair> pairs, int batch_size, int pad_id,
                            std::span<const std::size_t> order) {
    if (batch_size < 1) {
        throw Error("batchify: batch_size must be >= 1");
    }
    std::vector<std::size_t> identity;
    if (order.empty()) {
        identity.resize(pairs.size());
        for (std::size_t i = 0; i < identity.size(); ++i) {
            identity[i] = i;
        }
        order = identity;
    }
    if (order.size() != pairs.size()) {
        throw Error("batchify: order must be a permutation of the pairs");
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        Batch batch;
        batch.size = static_cast<int>(end - start);
        for (std::size_t i = start; i < end; ++i) {
            const auto& pair = pairs[order[i]];
            batch.upper_len = std::max(batch.upper_len, static_cast<int>(pair.upper.size()));
            batch.lower_len = std::max(batch.lower_len, static_cast<int>(pair.lower.size()));
        }
        batch.upper.assign(static_cast<std::size_t>(batch.size) * batch.upper_len, pad_id);
        batch.upper_mask.assign(batch.upper.size(), 0);
        batch.lower.assign(static_cast<std::size_t>(batch.size) * batch.lower_len, pad_id);
        batch.lower_mask.assign(batch.lower.size(), 0);
        for (std::size_t i = start; i < end; ++i) {
            const auto b = i - start;
            const auto& pair = pairs[order[i]];
            for (std::size_t t = 0; t < pair.upper.size(); ++t) {
                batch.upper[b * batch.upper_len + t] = pair.upper[t];
                batch.upper_mask[b * batch.upper_len + t] = 1;
            }
            for (std::size_t t = 0; t < pair.lower.size(); ++t) {
                batch.lower[b * batch.lower_len + t] = pair.lower[t];
                batch.lower_mask[b * batch.lower_len + t] = 1;
            }
            batch.source_index.push_back(order[i]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::mt19937_64 gen(seed);
    // Fisher-Yates with an explicit draw so the permutation does not depend on
    // the standard library's shuffle implementation.
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(gen() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

CorpusSplit split_corpus(std::span<const CoupletPair> pairs, double validation_fraction, std::uint64_t seed) {
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw Error("split_corpus: validation fraction must be in [0, 1)");
    }
    const auto order = shuffled_order(pairs.size(), seed);
    auto n_val = static_cast<std::size_t>(validation_fraction * static_cast<double>(pairs.size()));
    if (validation_fraction > 0.0 && n_val == 0 && pairs.size() >= 2) {
        n_val = 1;
    }
    CorpusSplit split;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i + n_val < order.size() ? split.train : split.validation).push_back(pairs[order[i]]);
    }
    return split;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace couplet
