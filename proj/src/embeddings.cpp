#include "fbrank/embeddings.hpp"

#include <bit>
#include <cmath>
#include <filesystem>

#include "fbrank/error.hpp"
#include "fbrank/util.hpp"

namespace fbrank::embeddings {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<std::size_t> EmbeddingTable::find(const std::string& id) const {
    if (lookup_.size() != ids.size()) {
        lookup_.clear();
        for (std::size_t i = 0; i < ids.size(); ++i) lookup_.emplace(ids[i], i);
    }
    auto it = lookup_.find(id);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

void EmbeddingTable::check() const {
    const auto n = static_cast<Eigen::Index>(ids.size());
    if (context.rows() != n || feedback.rows() != n)
        throw ShapeError("embedding table has " + std::to_string(n) + " ids but " + std::to_string(context.rows()) +
                         "/" + std::to_string(feedback.rows()) + " rows");
    if (!labels.empty() && labels.size() != ids.size()) throw ShapeError("label column length differs from ids");
    if (!conversations.empty() && conversations.size() != ids.size())
        throw ShapeError("conversation column length differs from ids");
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

}  // namespace

std::string encode_matrix(const Eigen::MatrixXd& m) {
    std::string out = "FBEM";
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
    return out;
}

Eigen::MatrixXd decode_matrix(std::string_view bytes) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != "FBEM") throw DataError("not an FBEM embedding matrix");
    const std::uint32_t rows = get_u32(bytes, 4);
    const std::uint32_t cols = get_u32(bytes, 8);
    if (bytes.size() != 12 + 4 * std::size_t(rows) * cols) throw DataError("FBEM payload length does not match header");
    Eigen::MatrixXd m(rows, cols);
    std::size_t offset = 12;
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c, offset += 4) m(r, c) = std::bit_cast<float>(get_u32(bytes, offset));
    return m;
}

void write_table(const std::string& dir, const EmbeddingTable& table, const json& metadata) {
    table.check();
    fs::create_directories(dir);
    io::write_file_atomic((fs::path(dir) / "context.fbem").string(), encode_matrix(table.context));
    io::write_file_atomic((fs::path(dir) / "feedback.fbem").string(), encode_matrix(table.feedback));
    json labels = json::array();
    for (std::size_t i = 0; i < table.size(); ++i) {
        const bool has = !table.labels.empty() && table.labels[i].has_value();
        labels.push_back(has ? json(corpus::to_string(*table.labels[i])) : json(nullptr));
    }
    json index = {{"v", 1},
                  {"ids", table.ids},
                  {"conversations", table.conversations},
                  {"labels", labels},
                  {"dim", table.context.cols()},
                  {"meta", metadata}};
    io::write_file_atomic((fs::path(dir) / "index.json").string(), index.dump(1) + "\n");
}

EmbeddingTable read_table(const std::string& dir, json* metadata) {
    EmbeddingTable table;
    try {
        const json index = json::parse(io::read_file((fs::path(dir) / "index.json").string()));
        if (index.value("v", 0) != 1) throw DataError(dir + ": unsupported embedding index version");
        table.ids = index.at("ids").get<std::vector<std::string>>();
        table.conversations = index.value("conversations", std::vector<std::string>{});
        for (const auto& l : index.value("labels", json::array()))
            table.labels.push_back(l.is_null() ? std::nullopt
                                               : std::optional(corpus::parse_function(l.get<std::string>())));
        if (metadata) *metadata = index.value("meta", json::object());
    } catch (const json::exception& e) {
        throw DataError(dir + ": malformed embedding index: " + e.what());
    }
    table.context = decode_matrix(io::read_file((fs::path(dir) / "context.fbem").string()));
    table.feedback = decode_matrix(io::read_file((fs::path(dir) / "feedback.fbem").string()));
    table.check();
    return table;
}

EmbeddingTable concatenate(std::vector<EmbeddingTable> parts) {
    if (parts.empty()) return {};
    if (parts.size() == 1) return std::move(parts.front());
    const Eigen::Index dim = parts.front().context.cols();
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        if (p.context.cols() != dim || p.feedback.cols() != dim)
            throw ShapeError("embedding tables differ in dimension");
        rows += static_cast<Eigen::Index>(p.size());
    }
    EmbeddingTable all;
    all.context.resize(rows, dim);
    all.feedback.resize(rows, dim);
    Eigen::Index r = 0;
    for (auto& p : parts) {
        const auto n = static_cast<Eigen::Index>(p.size());
        all.context.middleRows(r, n) = p.context;
        all.feedback.middleRows(r, n) = p.feedback;
        r += n;
        all.ids.insert(all.ids.end(), p.ids.begin(), p.ids.end());
        all.conversations.insert(all.conversations.end(), p.conversations.begin(), p.conversations.end());
        all.labels.insert(all.labels.end(), p.labels.begin(), p.labels.end());
    }
    return all;
}

}  // namespace fbrank::embeddings
