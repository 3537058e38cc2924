#pragma once

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace fet {

class ExpressionVocabulary {
public:
    ExpressionVocabulary() = default;
    explicit ExpressionVocabulary(std::vector<std::string> labels);

    // happiness, disgust, anger, fear, surprise, contempt, sadness
    static ExpressionVocabulary ck();
    // ck() plus neutral
    static ExpressionVocabulary celebv();
    // "ck", "celebv", or a path to a JSON list of labels.
    static ExpressionVocabulary named(const std::string& name_or_path);

    const std::vector<std::string>& labels() const { return labels_; }
    int size() const { return static_cast<int>(labels_.size()); }
    bool contains(const std::string& label) const;
    int index_of(const std::string& label) const;  // ValidationError if absent
    const std::string& label(int index) const { return labels_.at(static_cast<std::size_t>(index)); }

    bool operator==(const ExpressionVocabulary&) const = default;

private:
    std::vector<std::string> labels_;
};

struct Instruction {
    int template_id = 1;
    std::string expr_from;
    std::string expr_to;
    std::string text;

    bool operator==(const Instruction&) const = default;
};

constexpr int kTemplateCount = 5;

Instruction render_instruction(int template_id, const std::string& expr_from, const std::string& expr_to,
                               const ExpressionVocabulary& vocab);

// Removes square brackets and collapses whitespace, so the bracketed
// template forms ("from [fear to [anger].") map onto rendered text.
std::string canonical_instruction_text(std::string_view text);

// Lowercased alphanumeric runs; whitespace and punctuation separate tokens.
std::vector<std::string> tokenize(std::string_view text);

// L×d_t text feature matrix.
using TextEmbedding = Eigen::MatrixXd;

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual TextEmbedding embed(const std::string& text) const = 0;
    virtual int length() const = 0;
    virtual int dim() const = 0;
    virtual nlohmann::json describe() const = 0;
};

// Deterministic stand-in for a frozen text encoder. Each token becomes a
// seeded Gaussian vector plus a vector keyed by (previous token, token), so
// the rows carry left context the way a causal encoder's outputs do.
class HashingEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit HashingEmbeddingProvider(std::uint64_t seed = 0, int length = 77, int dim = 768);

    TextEmbedding embed(const std::string& text) const override;
    int length() const override { return length_; }
    int dim() const override { return dim_; }
    nlohmann::json describe() const override;

private:
    Eigen::RowVectorXd token_vector(std::uint64_t key) const;

    std::uint64_t seed_;
    int length_;
    int dim_;
};

// Exact-match retrieval from a precomputed embedding archive.
class LookupEmbeddingProvider final : public EmbeddingProvider {
public:
    static LookupEmbeddingProvider load(const std::filesystem::path& dir);

    TextEmbedding embed(const std::string& text) const override;
    int length() const override { return length_; }
    int dim() const override { return dim_; }
    nlohmann::json describe() const override;

private:
    std::filesystem::path dir_;
    std::map<std::string, TextEmbedding> table_;
    int length_ = 0;
    int dim_ = 0;
};

void save_embedding_archive(const std::map<std::string, TextEmbedding>& embeddings, const std::filesystem::path& dir);

// Rebuilds a provider from describe() output.
std::unique_ptr<EmbeddingProvider> make_provider(const nlohmann::json& description);

}  // namespace fet
