#pragma once

// Exported embedding tables: one context and one feedback vector per
// instance. On disk a table is a directory with context.fbem, feedback.fbem
// ("FBEM", u32 N, u32 M, N*M little-endian float32, row-major) and index.json.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/corpus.hpp"

namespace fbrank::embeddings {

struct EmbeddingTable {
    std::vector<std::string> ids;
    std::vector<std::string> conversations;
    std::vector<std::optional<corpus::FunctionLabel>> labels;
    Eigen::MatrixXd context;   // N x M
    Eigen::MatrixXd feedback;  // N x M

    [[nodiscard]] std::size_t size() const { return ids.size(); }
    [[nodiscard]] std::optional<std::size_t> find(const std::string& id) const;
    void check() const;

private:
    mutable std::map<std::string, std::size_t> lookup_;
};

std::string encode_matrix(const Eigen::MatrixXd& m);
Eigen::MatrixXd decode_matrix(std::string_view bytes);

void write_table(const std::string& dir, const EmbeddingTable& table,
                 const nlohmann::json& metadata = nlohmann::json::object());
EmbeddingTable read_table(const std::string& dir, nlohmann::json* metadata = nullptr);

// Row-wise concatenation; all parts must share the embedding dimension.
EmbeddingTable concatenate(std::vector<EmbeddingTable> parts);

}  // namespace fbrank::embeddings
