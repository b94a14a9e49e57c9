#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fastslow/errors.hpp"

namespace fastslow {

// All writers go through a temp file plus rename so a crash mid-write never
// leaves a truncated file at the destination.
inline void atomic_write_text(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    std::error_code ec;
    if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw DataError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, target, ec);
    if (ec) throw DataError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline bool file_exists(const std::string& path) {
    return std::filesystem::exists(std::filesystem::path(path));
}

}  // namespace fastslow
