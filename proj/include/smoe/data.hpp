#pragma once

// Token streams: a sticky hidden-Markov generator over cluster
// sub-vocabularies, and byte-level windows from a UTF-8 text file.
// Every batch is a pure function of (seed, purpose, step).

#include <smoe/config.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <span>
#include <vector>

namespace smoe {

/// `sequences` rows of `seq_len + 1` tokens: positions [0, seq_len) are
/// inputs and positions [1, seq_len] their next-token targets.
struct Batch {
    std::size_t sequences = 0;
    std::size_t seq_len = 0;
    std::vector<std::uint32_t> tokens;

    std::span<const std::uint32_t> sequence(std::size_t s) const {
        return {tokens.data() + s * (seq_len + 1), seq_len + 1};
    }
    std::size_t positions() const noexcept { return sequences * seq_len; }
};

class SyntheticClustered {
public:
    SyntheticClustered(std::size_t vocab, std::size_t clusters, double stickiness, double noise,
                       std::uint64_t seed)
        : vocab_(vocab), stickiness_(stickiness), noise_(noise) {
        if (clusters < 1 || clusters > vocab) throw std::invalid_argument("SyntheticClustered: need 1 <= clusters <= vocab");
        Rng rng = Rng(seed).split("data/structure");
        const std::size_t base = vocab / clusters;
        for (std::size_t c = 0; c < clusters; ++c) {
            Cluster cl;
            const std::size_t lo = c * base, hi = (c + 1 == clusters) ? vocab : lo + base;
            for (std::size_t t = lo; t < hi; ++t) cl.tokens.push_back(std::uint32_t(t));
            rng.shuffle(std::span<std::uint32_t>(cl.tokens));
            // Zipf weights over the shuffled order.
            double total = 0.0;
            for (std::size_t r = 0; r < cl.tokens.size(); ++r) total += 1.0 / double(r + 1);
            double acc = 0.0;
            for (std::size_t r = 0; r < cl.tokens.size(); ++r) {
                acc += 1.0 / double(r + 1) / total;
                cl.cdf.push_back(acc);
            }
            cl.cdf.back() = 1.0;
            cl.lo = lo;
            cl.hi = hi;
            clusters_.push_back(std::move(cl));
        }
    }

    std::size_t clusters() const noexcept { return clusters_.size(); }

    /// Whether `token` belongs to cluster `c`'s sub-vocabulary.
    bool in_cluster(std::uint32_t token, std::size_t c) const {
        return token >= clusters_[c].lo && token < clusters_[c].hi;
    }

    /// Generates `length` tokens; optionally reports the hidden cluster of each.
    std::vector<std::uint32_t> generate(Rng& rng, std::size_t length, std::vector<std::uint32_t>* hidden = nullptr) const {
        std::vector<std::uint32_t> out(length);
        if (hidden) hidden->resize(length);
        std::size_t state = rng.below(clusters_.size());
        for (std::size_t t = 0; t < length; ++t) {
            if (t > 0 && clusters_.size() > 1 && rng.uniform_f64() >= stickiness_) {
                const std::size_t jump = 1 + rng.below(clusters_.size() - 1);
                state = (state + jump) % clusters_.size();
            }
            if (hidden) (*hidden)[t] = std::uint32_t(state);
            if (noise_ > 0.0 && rng.uniform_f64() < noise_) {
                out[t] = std::uint32_t(rng.below(vocab_));
                continue;
            }
            const auto& cl = clusters_[state];
            const double u = rng.uniform_f64();
            const auto it = std::upper_bound(cl.cdf.begin(), cl.cdf.end(), u);
            out[t] = cl.tokens[std::min<std::size_t>(std::size_t(it - cl.cdf.begin()), cl.tokens.size() - 1)];
        }
        return out;
    }

private:
    struct Cluster {
        std::vector<std::uint32_t> tokens;
        std::vector<double> cdf;
        std::size_t lo = 0, hi = 0;
    };
    std::size_t vocab_;
    double stickiness_;
    double noise_;
    std::vector<Cluster> clusters_;
};

/// Byte-level text corpus split into a training part (first 90%) and a
/// held-out part.
class TextCorpus {
public:
    explicit TextCorpus(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open text corpus " + path.string());
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    explicit TextCorpus(std::string bytes) : bytes_(std::move(bytes)) {}

    std::vector<std::uint32_t> window(Rng& rng, std::size_t length, bool held_out) const {
        const std::size_t split = bytes_.size() * 9 / 10;
        const std::size_t lo = held_out ? split : 0, hi = held_out ? bytes_.size() : split;
        if (hi - lo < length) throw std::runtime_error("text corpus too short for the requested sequence length");
        const std::size_t start = lo + rng.below(hi - lo - length + 1);
        std::vector<std::uint32_t> out(length);
        for (std::size_t i = 0; i < length; ++i) out[i] = static_cast<unsigned char>(bytes_[start + i]);
        return out;
    }

private:
    std::string bytes_;
};

class DataStream {
public:
    explicit DataStream(const ModelConfig& cfg) : cfg_(cfg) {
        if (cfg.data_source == DataSource::text_file)
            text_ = std::make_shared<TextCorpus>(std::filesystem::path(cfg.data_path));
        else
            synth_ = std::make_shared<SyntheticClustered>(cfg.vocab, cfg.data_clusters, cfg.data_stickiness,
                                                          cfg.data_noise, cfg.seed);
    }

    Batch train_batch(std::size_t step) const {
        return make(Rng(cfg_.seed).split("data/train", step), cfg_.batch_sequences, false);
    }

    Batch eval_batch(std::size_t index = 0) const {
        return make(Rng(cfg_.seed).split("data/eval", index), cfg_.eval_sequences, true);
    }

    const SyntheticClustered* synthetic() const noexcept { return synth_.get(); }

private:
    Batch make(Rng rng, std::size_t sequences, bool held_out) const {
        Batch b;
        b.sequences = sequences;
        b.seq_len = cfg_.seq_len;
        b.tokens.reserve(sequences * (cfg_.seq_len + 1));
        for (std::size_t s = 0; s < sequences; ++s) {
            Rng seq_rng = rng.split(s);
            const auto toks = text_ ? text_->window(seq_rng, cfg_.seq_len + 1, held_out)
                                    : synth_->generate(seq_rng, cfg_.seq_len + 1);
            b.tokens.insert(b.tokens.end(), toks.begin(), toks.end());
        }
        return b;
    }

    ModelConfig cfg_;
    std::shared_ptr<const SyntheticClustered> synth_;
    std::shared_ptr<const TextCorpus> text_;
};

}  // namespace smoe
