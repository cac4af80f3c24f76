#pragma once

#include <functional>
#include <string>
#include <vector>

namespace fbrank::log {

using Sink = std::function<void(const std::string&)>;

void warn(const std::string& message);
void info(const std::string& message);

// Replaces the warning sink (stderr by default); returns the previous one.
Sink set_warning_sink(Sink sink);
void set_verbose(bool verbose);

// Captures warnings for the lifetime of the object; used by tests.
class ScopedCapture {
public:
    ScopedCapture();
    ~ScopedCapture();
    ScopedCapture(const ScopedCapture&) = delete;
    ScopedCapture& operator=(const ScopedCapture&) = delete;

    [[nodiscard]] const std::vector<std::string>& messages() const { return messages_; }
    [[nodiscard]] bool contains(const std::string& needle) const;

private:
    std::vector<std::string> messages_;
    Sink previous_;
};

}  // namespace fbrank::log
