#pragma once

// Binary PGM (P5) and PPM (P6) reading and writing, plus the dataset index
// format: one line per sample, "image-path label-or-mask-path split".

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kdml/common.hpp"

namespace kdml {

struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 1;  // 1 = PGM, 3 = PPM
    std::vector<uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

inline int next_pnm_int(std::istream& is) {
    // Skips whitespace and '#' comment lines, as the PNM family allows.
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = is.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = is.get();
    }
    if (c == EOF) throw error("pnm: unexpected end of header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    return v;
}

}  // namespace detail

inline ImageU8 read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw error("pnm: cannot open " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6'))
        throw error("pnm: " + path + " is not a binary PGM/PPM file");
    ImageU8 img;
    img.channels = m1 == '5' ? 1 : 3;
    img.width = detail::next_pnm_int(is);
    img.height = detail::next_pnm_int(is);
    const int maxval = detail::next_pnm_int(is);
    if (maxval != 255) throw error("pnm: only maxval 255 is supported, got " + std::to_string(maxval));
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * img.channels);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw error("pnm: truncated pixel data in " + path);
    return img;
}

inline void write_pnm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw contract_error("pnm: images must have 1 or 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw error("pnm: cannot open " + path + " for writing");
    os << (img.channels == 1 ? "P5" : "P6") << "\n"
       << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw error("pnm: write failed for " + path);
}

struct IndexEntry {
    std::string image;
    std::string target;  // class label (decimal) or mask path
    std::string split;   // train | val | test
};

inline std::vector<IndexEntry> read_index(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw error("index: cannot open " + path);
    std::vector<IndexEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        IndexEntry e;
        if (!(ss >> e.image >> e.target >> e.split))
            throw error("index: malformed line " + std::to_string(lineno) + " in " + path);
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw error("index: unknown split tag '" + e.split + "' at line " +
                        std::to_string(lineno));
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void write_index(const std::string& path, const std::vector<IndexEntry>& entries) {
    std::ofstream os(path);
    if (!os) throw error("index: cannot open " + path + " for writing");
    for (const auto& e : entries) os << e.image << " " << e.target << " " << e.split << "\n";
    if (!os) throw error("index: write failed for " + path);
}

}  // namespace kdml
