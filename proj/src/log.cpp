#include "fbrank/log.hpp"

#include <iostream>
#include <mutex>

namespace fbrank::log {
namespace {

std::mutex sink_mutex;
bool verbose_enabled = false;

Sink& warning_sink() {
    static Sink sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    return sink;
}

}  // namespace

void warn(const std::string& message) {
    std::lock_guard lock(sink_mutex);
    if (warning_sink()) warning_sink()(message);
}

void info(const std::string& message) {
    if (!verbose_enabled) return;
    std::lock_guard lock(sink_mutex);
    std::cerr << message << '\n';
}

Sink set_warning_sink(Sink sink) {
    std::lock_guard lock(sink_mutex);
    Sink previous = std::move(warning_sink());
    warning_sink() = std::move(sink);
    return previous;
}

void set_verbose(bool verbose) { verbose_enabled = verbose; }

ScopedCapture::ScopedCapture() {
    previous_ = set_warning_sink([this](const std::string& m) { messages_.push_back(m); });
}

ScopedCapture::~ScopedCapture() { set_warning_sink(std::move(previous_)); }

bool ScopedCapture::contains(const std::string& needle) const {
    for (const auto& m : messages_)
        if (m.find(needle) != std::string::npos) return true;
    return false;
}

}  // namespace fbrank::log
