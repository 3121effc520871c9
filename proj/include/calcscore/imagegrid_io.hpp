#pragma once

// Volume container: a UTF-8 text header of `key = value` lines next to a raw
// little-endian payload (x fastest, then y, then z).
//
//   format = calcscore-volume
//   version = 1
//   kind = ct | labels
//   dims = <z> <y> <x>
//   spacing = <z> <y> <x>            mm, 6 decimals
//   origin = <z> <y> <x>             mm, 6 decimals
//   slice_thickness = <mm>
//   element_type = int16 | float32   (ct)  /  uint8 (labels)
//   byte_order = little
//   data_file = <payload path relative to the header>
//   classes = 0:background 1:lad ... (labels only)
//
// CT volumes are written as int16 when every HU value is an integer in
// range, otherwise as float32, so a save/load round trip is always exact.

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "calcscore/imagegrid.hpp"

namespace calcscore {

namespace io_detail {

namespace fs = std::filesystem;

inline std::string fmt6(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

inline std::string triple(const Vec3& v) { return fmt6(v.z) + " " + fmt6(v.y) + " " + fmt6(v.x); }

template <typename T>
void put_le(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(const unsigned char* p) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

inline fs::path payload_path_for(const fs::path& header) {
    fs::path p = header;
    p.replace_extension(".raw");
    return p;
}

struct Header {
    std::map<std::string, std::string> fields;

    const std::string& get(const std::string& key) const {
        auto it = fields.find(key);
        require(it != fields.end(), ErrorKind::malformed_header, "header is missing '" + key + "'");
        return it->second;
    }
};

inline Header parse_header(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::missing_input, "cannot open header " + path.string());
    static const char* known[] = {"format", "version", "kind", "dims", "spacing", "origin",
                                  "slice_thickness", "element_type", "byte_order", "data_file",
                                  "classes"};
    Header h;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::malformed_header,
                path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        require(std::find(std::begin(known), std::end(known), key) != std::end(known),
                ErrorKind::malformed_header, "unknown header field '" + key + "'");
        require(!h.fields.count(key), ErrorKind::malformed_header, "duplicate header field '" + key + "'");
        h.fields[key] = value;
    }
    require(h.get("format") == "calcscore-volume", ErrorKind::malformed_header, "not a calcscore volume header");
    require(h.get("version") == "1", ErrorKind::malformed_header, "unsupported header version " + h.get("version"));
    require(h.get("byte_order") == "little", ErrorKind::malformed_header, "byte_order must be little");
    return h;
}

inline std::vector<double> numbers(const std::string& s, std::size_t n, const std::string& key) {
    std::istringstream is(s);
    std::vector<double> out;
    double v;
    while (is >> v) out.push_back(v);
    require(is.eof() && out.size() == n, ErrorKind::malformed_header,
            "field '" + key + "' must hold " + std::to_string(n) + " numbers");
    return out;
}

struct Geometry {
    Dims dims;
    Vec3 spacing, origin;
    double thickness = 0;
};

inline Geometry parse_geometry(const Header& h) {
    Geometry g;
    auto d = numbers(h.get("dims"), 3, "dims");
    for (double v : d)
        require(v >= 1 && v == std::floor(v), ErrorKind::malformed_header, "dims must be positive integers");
    g.dims = {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
    auto s = numbers(h.get("spacing"), 3, "spacing");
    auto o = numbers(h.get("origin"), 3, "origin");
    g.spacing = {s[0], s[1], s[2]};
    g.origin = {o[0], o[1], o[2]};
    g.thickness = numbers(h.get("slice_thickness"), 1, "slice_thickness")[0];
    require(g.spacing.z > 0 && g.spacing.y > 0 && g.spacing.x > 0 && g.thickness > 0,
            ErrorKind::malformed_header, "spacing and slice_thickness must be positive");
    return g;
}

inline std::vector<unsigned char> read_payload(const fs::path& header, const Header& h, std::size_t expected) {
    fs::path raw = header.parent_path() / h.get("data_file");
    std::ifstream in(raw, std::ios::binary);
    require(in.good(), ErrorKind::missing_input, "cannot open payload " + raw.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(bytes.size() == expected, ErrorKind::size_mismatch,
            "size mismatch: payload " + raw.string() + " has " + std::to_string(bytes.size()) +
                " bytes, header implies " + std::to_string(expected));
    return bytes;
}

template <typename V>
void write_header(const fs::path& path, const Volume<V>& v, const std::string& kind,
                  const std::string& element_type, const fs::path& raw) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io_error, "cannot write " + path.string());
    out << "format = calcscore-volume\n"
        << "version = 1\n"
        << "kind = " << kind << "\n"
        << "dims = " << v.dims().z << " " << v.dims().y << " " << v.dims().x << "\n"
        << "spacing = " << triple(v.spacing()) << "\n"
        << "origin = " << triple(v.origin()) << "\n"
        << "slice_thickness = " << fmt6(v.slice_thickness()) << "\n"
        << "element_type = " << element_type << "\n"
        << "byte_order = little\n"
        << "data_file = " << raw.filename().string() << "\n";
    if (kind == "labels") {
        out << "classes =";
        for (int c = 0; c < kNumClasses; ++c) out << " " << c << ":" << class_name(c);
        out << "\n";
    }
}

}  // namespace io_detail

inline void save_volume(const std::filesystem::path& header, const CtVolume& v) {
    using namespace io_detail;
    bool as_int16 = std::all_of(v.data().begin(), v.data().end(), [](float f) {
        return f == std::nearbyint(f) && f >= -32768.f && f <= 32767.f && !(f == 0.f && std::signbit(f));
    });
    auto raw = payload_path_for(header);
    write_header(header, v, "ct", as_int16 ? "int16" : "float32", raw);
    std::ofstream out(raw, std::ios::binary);
    require(out.good(), ErrorKind::io_error, "cannot write " + raw.string());
    for (float f : v.data()) {
        if (as_int16)
            put_le<std::int16_t>(out, static_cast<std::int16_t>(f));
        else
            put_le<float>(out, f);
    }
}

inline CtVolume load_volume(const std::filesystem::path& header) {
    using namespace io_detail;
    Header h = parse_header(header);
    require(h.get("kind") == "ct", ErrorKind::malformed_header, "expected kind = ct");
    Geometry g = parse_geometry(h);
    const std::string& et = h.get("element_type");
    require(et == "int16" || et == "float32", ErrorKind::malformed_header, "unsupported CT element_type " + et);
    const std::size_t width = et == "int16" ? 2 : 4;
    auto bytes = read_payload(header, h, g.dims.count() * width);
    std::vector<float> data(g.dims.count());
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = width == 2 ? static_cast<float>(get_le<std::int16_t>(&bytes[2 * i]))
                             : get_le<float>(&bytes[4 * i]);
    CtVolume v(g.dims, g.spacing, g.origin, g.thickness, std::move(data));
    validate(v);
    return v;
}

inline void save_labels(const std::filesystem::path& header, const LabelMap& l) {
    using namespace io_detail;
    validate(l);
    auto raw = payload_path_for(header);
    write_header(header, l, "labels", "uint8", raw);
    std::ofstream out(raw, std::ios::binary);
    require(out.good(), ErrorKind::io_error, "cannot write " + raw.string());
    out.write(reinterpret_cast<const char*>(l.data().data()), static_cast<std::streamsize>(l.size()));
}

inline LabelMap load_labels(const std::filesystem::path& header) {
    using namespace io_detail;
    Header h = parse_header(header);
    require(h.get("kind") == "labels", ErrorKind::malformed_header, "expected kind = labels");
    require(h.get("element_type") == "uint8", ErrorKind::malformed_header, "label element_type must be uint8");
    if (h.fields.count("classes")) {
        std::istringstream is(h.get("classes"));
        std::string item;
        while (is >> item) {
            auto colon = item.find(':');
            require(colon != std::string::npos, ErrorKind::malformed_header, "bad classes entry '" + item + "'");
            int code = -1;
            try {
                code = std::stoi(item.substr(0, colon));
            } catch (const std::exception&) {
                fail(ErrorKind::malformed_header, "bad classes entry '" + item + "'");
            }
            require(code >= 0 && code < kNumClasses, ErrorKind::unknown_class_code,
                    "unknown class code " + std::to_string(code) + " declared in header");
            require(class_name(code) == item.substr(colon + 1), ErrorKind::unknown_class_code,
                    "class code " + std::to_string(code) + " declared with wrong name");
        }
    }
    Geometry g = parse_geometry(h);
    auto bytes = read_payload(header, h, g.dims.count());
    LabelMap l(g.dims, g.spacing, g.origin, g.thickness, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
    validate(l);
    return l;
}

}  // namespace calcscore
