#pragma once

// Weights file, version 1:
//
//   calcscore-weights 1
//   network <name>
//   fingerprint <16 hex digits>
//   architecture <layer description>
//   seed <uint64>
//   steps <uint64>
//   meta <key> <value>          (zero or more, in insertion order)
//   tensor <name> <rank> <extents...>
//   ...
//   end
//   <payload: every tensor as little-endian float32, in header order>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "calcscore/nn/layers.hpp"

namespace calcscore::nn {

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

struct NetworkWeights {
    std::string network;
    std::string architecture;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::uint64_t steps = 0;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<NamedTensor> tensors;

    const std::string& meta_value(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        fail(ErrorKind::malformed_header, "weights file lacks meta '" + key + "'");
    }
};

inline std::string fingerprint_of(const std::string& architecture) { return hash_string(architecture); }

inline std::string describe_architecture(std::span<const LayerSpec> specs) {
    std::string s;
    for (const auto& l : specs) s += (s.empty() ? "" : " ") + l.describe();
    return s;
}

template <typename T>
std::vector<NamedTensor> export_tensors(std::span<Parameter<T>* const> params) {
    std::vector<NamedTensor> out;
    for (const auto* p : params) out.push_back({p->name, p->value.template cast<float>()});
    return out;
}

template <typename T>
void import_tensors(std::span<Parameter<T>* const> params, const std::vector<NamedTensor>& tensors) {
    require(params.size() == tensors.size(), ErrorKind::fingerprint_mismatch,
            "weights hold " + std::to_string(tensors.size()) + " tensors, architecture needs " +
                std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i]->name == tensors[i].name && params[i]->value.shape() == tensors[i].value.shape(),
                ErrorKind::fingerprint_mismatch, "tensor " + tensors[i].name + " does not match " + params[i]->name);
        params[i]->value = tensors[i].value.template cast<T>();
    }
}

inline void save_weights(const std::filesystem::path& path, const NetworkWeights& w) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io_error, "cannot write " + path.string());
    out << "calcscore-weights 1\n"
        << "network " << w.network << "\n"
        << "fingerprint " << w.fingerprint << "\n"
        << "architecture " << w.architecture << "\n"
        << "seed " << w.seed << "\n"
        << "steps " << w.steps << "\n";
    for (const auto& [k, v] : w.meta) out << "meta " << k << " " << v << "\n";
    for (const auto& t : w.tensors) {
        out << "tensor " << t.name << " " << t.value.rank();
        for (int e : t.value.shape()) out << " " << e;
        out << "\n";
    }
    out << "end\n";
    for (const auto& t : w.tensors)
        for (float f : t.value.values()) {
            unsigned char b[4];
            std::memcpy(b, &f, 4);
            if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
            out.write(reinterpret_cast<const char*>(b), 4);
        }
}

inline NetworkWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::missing_input, "cannot open weights " + path.string());
    NetworkWeights w;
    std::string line;
    auto next = [&](const std::string& key) {
        require(static_cast<bool>(std::getline(in, line)), ErrorKind::malformed_header, "weights header truncated");
        require(line.rfind(key + " ", 0) == 0, ErrorKind::malformed_header,
                "weights header: expected '" + key + "', got '" + line + "'");
        return line.substr(key.size() + 1);
    };
    require(static_cast<bool>(std::getline(in, line)) && line == "calcscore-weights 1", ErrorKind::malformed_header,
            "not a version-1 calcscore weights file");
    w.network = next("network");
    w.fingerprint = next("fingerprint");
    w.architecture = next("architecture");
    try {
        w.seed = std::stoull(next("seed"));
        w.steps = std::stoull(next("steps"));
    } catch (const std::logic_error&) {
        fail(ErrorKind::malformed_header, "weights header: bad seed/steps");
    }
    require(fingerprint_of(w.architecture) == w.fingerprint, ErrorKind::fingerprint_mismatch,
            "weights fingerprint does not match the recorded architecture");
    while (std::getline(in, line) && line != "end") {
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag == "meta") {
            std::string k, v;
            is >> k;
            std::getline(is >> std::ws, v);
            w.meta.emplace_back(k, v);
        } else if (tag == "tensor") {
            NamedTensor t;
            int rank = 0;
            is >> t.name >> rank;
            std::vector<int> shape(static_cast<std::size_t>(std::max(rank, 0)));
            for (auto& e : shape) is >> e;
            require(!is.fail() && rank >= 0, ErrorKind::malformed_header, "bad tensor line '" + line + "'");
            t.value = Tensor<float>(shape);
            w.tensors.push_back(std::move(t));
        } else {
            fail(ErrorKind::malformed_header, "unexpected weights header line '" + line + "'");
        }
    }
    require(line == "end", ErrorKind::malformed_header, "weights header missing 'end'");
    for (auto& t : w.tensors) {
        std::vector<unsigned char> bytes(t.value.size() * 4);
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<std::size_t>(in.gcount()) == bytes.size(), ErrorKind::size_mismatch,
                "weights payload truncated at " + t.name);
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            unsigned char* b = &bytes[4 * i];
            if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + 4);
            std::memcpy(&t.value[i], b, 4);
        }
    }
    require(in.peek() == std::char_traits<char>::eof(), ErrorKind::size_mismatch, "trailing bytes in weights file");
    return w;
}

}  // namespace calcscore::nn
