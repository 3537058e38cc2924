#include "fet/text_embed.hpp"

#include "fet/errors.hpp"
#include "fet/random.hpp"
#include "fet/tensor_archive.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace fet {

ExpressionVocabulary::ExpressionVocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) {
    std::set<std::string> seen;
    for (const auto& l : labels_) {
        if (l.empty()) throw ValidationError("vocabulary labels must be non-empty");
        if (std::any_of(l.begin(), l.end(), [](unsigned char c) { return std::isupper(c); }))
            throw ValidationError("vocabulary label '" + l + "' must be lowercase");
        if (!seen.insert(l).second) throw ValidationError("duplicate vocabulary label '" + l + "'");
    }
}

ExpressionVocabulary ExpressionVocabulary::ck() {
    return ExpressionVocabulary({"happiness", "disgust", "anger", "fear", "surprise", "contempt", "sadness"});
}

ExpressionVocabulary ExpressionVocabulary::celebv() {
    return ExpressionVocabulary(
        {"happiness", "disgust", "anger", "fear", "surprise", "contempt", "sadness", "neutral"});
}

ExpressionVocabulary ExpressionVocabulary::named(const std::string& name_or_path) {
    if (name_or_path == "ck") return ck();
    if (name_or_path == "celebv") return celebv();
    std::ifstream in(name_or_path);
    if (!in) throw IoError("cannot open vocabulary file " + name_or_path);
    try {
        return ExpressionVocabulary(nlohmann::json::parse(in).get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(name_or_path + ": " + e.what());
    }
}

bool ExpressionVocabulary::contains(const std::string& label) const {
    return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

int ExpressionVocabulary::index_of(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) throw ValidationError("label '" + label + "' is not in the vocabulary");
    return static_cast<int>(it - labels_.begin());
}

Instruction render_instruction(int template_id, const std::string& expr_from, const std::string& expr_to,
                               const ExpressionVocabulary& vocab) {
    vocab.index_of(expr_from);
    vocab.index_of(expr_to);
    const std::string tail = expr_from + " to " + expr_to + ".";
    std::string text;
    switch (template_id) {
        case 1: text = "Turn this face from " + tail; break;
        case 2: text = "Change this face from " + tail; break;
        case 3: text = "Transform this face from " + tail; break;
        case 4: text = "Modify this face, changing it from " + tail; break;
        case 5: text = "Replace this face from " + tail; break;
        default: throw ValidationError("template id must be in 1..5, got " + std::to_string(template_id));
    }
    return Instruction{template_id, expr_from, expr_to, text};
}

std::string canonical_instruction_text(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (char c : text) {
        if (c == '[' || c == ']') continue;
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(c);
    }
    return out;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

HashingEmbeddingProvider::HashingEmbeddingProvider(std::uint64_t seed, int length, int dim)
    : seed_(seed), length_(length), dim_(dim) {
    if (length < 1 || dim < 1) throw ConfigError("embedding length and dim must be positive");
}

Eigen::RowVectorXd HashingEmbeddingProvider::token_vector(std::uint64_t key) const {
    Rng rng(derive_seed(seed_, {key}));
    return standard_normal(1, dim_, rng);
}

TextEmbedding HashingEmbeddingProvider::embed(const std::string& text) const {
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw ValidationError("cannot embed empty text");
    TextEmbedding out = TextEmbedding::Zero(length_, dim_);
    std::string prev = "<s>";
    const int n = std::min<int>(length_, static_cast<int>(tokens.size()));
    for (int i = 0; i < n; ++i) {
        const auto& tok = tokens[static_cast<std::size_t>(i)];
        Eigen::RowVectorXd row = token_vector(hash_string(tok));
        row += token_vector(splitmix64(hash_string(prev)) ^ hash_string(tok) ^ 0xb16a4ULL);
        out.row(i) = row / row.norm();
        prev = tok;
    }
    return out;
}

nlohmann::json HashingEmbeddingProvider::describe() const {
    return {{"provider", "hash"}, {"seed", seed_}, {"length", length_}, {"dim", dim_}};
}

LookupEmbeddingProvider LookupEmbeddingProvider::load(const std::filesystem::path& dir) {
    const TensorArchive ar = TensorArchive::load(dir);
    LookupEmbeddingProvider p;
    p.dir_ = dir;
    for (const auto& [key, entry] : ar.entries()) {
        TextEmbedding m = ar.matrix(key);
        if (p.table_.empty()) {
            p.length_ = static_cast<int>(m.rows());
            p.dim_ = static_cast<int>(m.cols());
        } else if (m.rows() != p.length_ || m.cols() != p.dim_) {
            throw ValidationError(dir.string() + ": embedding '" + key + "' has inconsistent shape");
        }
        p.table_[canonical_instruction_text(key)] = std::move(m);
    }
    if (p.table_.empty()) throw ValidationError(dir.string() + ": embedding archive is empty");
    return p;
}

TextEmbedding LookupEmbeddingProvider::embed(const std::string& text) const {
    if (canonical_instruction_text(text).empty()) throw ValidationError("cannot embed empty text");
    auto it = table_.find(canonical_instruction_text(text));
    if (it == table_.end()) throw NotFoundError("no embedding for key: \"" + text + "\"");
    return it->second;
}

nlohmann::json LookupEmbeddingProvider::describe() const {
    return {{"provider", "lookup"}, {"archive", dir_.string()}, {"length", length_}, {"dim", dim_}};
}

void save_embedding_archive(const std::map<std::string, TextEmbedding>& embeddings, const std::filesystem::path& dir) {
    TensorArchive ar;
    for (const auto& [key, m] : embeddings) ar.put(key, m);
    ar.meta() = {{"kind", "embeddings"}};
    ar.save(dir);
}

std::unique_ptr<EmbeddingProvider> make_provider(const nlohmann::json& d) {
    const std::string kind = d.value("provider", "hash");
    if (kind == "hash")
        return std::make_unique<HashingEmbeddingProvider>(d.value("seed", std::uint64_t{0}), d.value("length", 77),
                                                          d.value("dim", 768));
    if (kind == "lookup")
        return std::make_unique<LookupEmbeddingProvider>(LookupEmbeddingProvider::load(d.at("archive").get<std::string>()));
    throw ConfigError("unknown embedding provider '" + kind + "'");
}

}  // namespace fet
