#include "fbrank/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "fbrank/error.hpp"
#include "fbrank/util.hpp"

namespace fbrank::model {

using nlohmann::json;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

}  // namespace

std::string encode_checkpoint(const DualEncoder& model, const json& metadata) {
    const json block = {{"v", kCheckpointVersion},
                        {"spec", model.spec.to_json()},
                        {"learn_temperature", model.learn_temperature},
                        {"parameters", model.parameter_count()},
                        {"meta", metadata}};
    const std::string text = block.dump();
    std::string out = "FBCK";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (auto view : parameter_views(model))
        if (view.data() != &model.log_temperature)
            for (double d : view) put_f64(out, d);
    put_f64(out, model.log_temperature);
    return out;
}

DualEncoder decode_checkpoint(std::string_view bytes, json* metadata) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != "FBCK") throw DataError("not a checkpoint file");
    const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    const auto json_len = static_cast<std::size_t>(get_le(bytes, 8, 4));
    if (bytes.size() < 12 + json_len) throw DataError("truncated checkpoint header");
    json block;
    try {
        block = json::parse(bytes.substr(12, json_len));
    } catch (const json::exception& e) {
        throw DataError(std::string("corrupt checkpoint header: ") + e.what());
    }

    DualEncoder model = make_dual_encoder(ModelSpec::from_json(block.at("spec")), 1.0,
                                          block.value("learn_temperature", false), 0);
    std::size_t offset = 12 + json_len;
    auto read = [&]() {
        if (offset + 8 > bytes.size()) throw DataError("truncated checkpoint payload");
        const double d = std::bit_cast<double>(get_le(bytes, offset, 8));
        offset += 8;
        return d;
    };
    for (auto view : parameter_views(model))
        if (view.data() != &model.log_temperature)
            for (double& d : view) d = read();
    model.log_temperature = read();
    if (offset != bytes.size()) throw DataError("checkpoint has trailing bytes");
    if (metadata) *metadata = block.value("meta", json::object());
    return model;
}

void save_checkpoint(const std::string& path, const DualEncoder& model, const json& metadata) {
    io::write_file_atomic(path, encode_checkpoint(model, metadata));
}

DualEncoder load_checkpoint(const std::string& path, json* metadata) {
    try {
        return decode_checkpoint(io::read_file(path), metadata);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

}  // namespace fbrank::model
