#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stsr/tensor.hpp"

namespace stsr {

// Self-describing tensor container ("DSTC" files):
//   magic "DSTC" | version byte | u64 LE header length | UTF-8 JSON header |
//   concatenated little-endian payloads.
// The header lists name, dtype, shape, and byte offset per entry plus a free
// string->string metadata map (gene names, scales, normalization constants).
// Payload dtype is f32 by default; f64 is available for exact metadata.
class Container {
public:
    static constexpr char kMagic[4] = {'D', 'S', 'T', 'C'};
    static constexpr std::uint8_t kVersion = 1;

    void put(const std::string& name, Tensor t, const std::string& dtype = "f32") {
        if (dtype != "f32" && dtype != "f64")
            throw DomainError("Container: unsupported dtype '" + dtype + "'");
        entries_[name] = {std::move(t), dtype};
    }

    const Tensor& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw ContainerError("Container: no entry named '" + name + "'");
        return it->second.first;
    }
    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
    bool has_meta(const std::string& key) const { return meta_.count(key) > 0; }
    const std::string& meta(const std::string& key) const {
        auto it = meta_.find(key);
        if (it == meta_.end()) throw ContainerError("Container: no metadata key '" + key + "'");
        return it->second;
    }
    const std::map<std::string, std::string>& all_meta() const { return meta_; }

    void save(const std::string& path) const {
        nlohmann::json header;
        header["entries"] = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& [name, entry] : entries_) {
            const auto& [tensor, dtype] = entry;
            nlohmann::json e;
            e["name"] = name;
            e["dtype"] = dtype;
            e["shape"] = tensor.shape();
            e["offset"] = offset;
            header["entries"].push_back(e);
            offset += static_cast<std::uint64_t>(tensor.numel()) * (dtype == "f32" ? 4 : 8);
        }
        header["meta"] = meta_;
        std::string htext = header.dump();

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("Container: cannot open '" + path + "' for writing");
        out.write(kMagic, 4);
        char version = static_cast<char>(kVersion);
        out.write(&version, 1);
        std::uint64_t hlen = htext.size();
        char lenbuf[8];
        for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
        out.write(lenbuf, 8);
        out.write(htext.data(), static_cast<std::streamsize>(htext.size()));

        for (const auto& [name, entry] : entries_) {
            const auto& [tensor, dtype] = entry;
            if (dtype == "f32") {
                std::vector<float> buf(tensor.values().begin(), tensor.values().end());
                out.write(reinterpret_cast<const char*>(buf.data()),
                          static_cast<std::streamsize>(buf.size() * 4));
            } else {
                out.write(reinterpret_cast<const char*>(tensor.values().data()),
                          static_cast<std::streamsize>(tensor.values().size() * 8));
            }
        }
        if (!out) throw IoError("Container: short write to '" + path + "'");
    }

    static Container load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("Container: cannot open '" + path + "'");

        char magic[4];
        in.read(magic, 4);
        if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
            throw ContainerMagicError("Container: bad magic bytes in '" + path + "'");
        char version = 0;
        in.read(&version, 1);
        if (in.gcount() != 1 || static_cast<std::uint8_t>(version) != kVersion)
            throw ContainerVersionError("Container: unsupported version " +
                                        std::to_string(static_cast<int>(version)));
        char lenbuf[8];
        in.read(lenbuf, 8);
        if (in.gcount() != 8) throw ContainerTruncatedError("Container: truncated header length");
        std::uint64_t hlen = 0;
        for (int i = 0; i < 8; ++i)
            hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);

        std::string htext(hlen, '\0');
        in.read(htext.data(), static_cast<std::streamsize>(hlen));
        if (static_cast<std::uint64_t>(in.gcount()) != hlen)
            throw ContainerTruncatedError("Container: truncated header");

        nlohmann::json header;
        try {
            header = nlohmann::json::parse(htext);
        } catch (const nlohmann::json::exception& e) {
            throw ContainerError(std::string("Container: unparsable header: ") + e.what());
        }

        std::string payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());

        Container c;
        for (const auto& [key, value] : header.at("meta").items())
            c.meta_[key] = value.get<std::string>();
        for (const auto& e : header.at("entries")) {
            std::string name = e.at("name").get<std::string>();
            std::string dtype = e.at("dtype").get<std::string>();
            std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            std::uint64_t offset = e.at("offset").get<std::uint64_t>();
            std::uint64_t count = 1;
            for (int d : shape) count *= static_cast<std::uint64_t>(d);
            std::uint64_t bytes = count * (dtype == "f32" ? 4 : 8);
            if (offset + bytes > payload.size())
                throw ContainerTruncatedError("Container: entry '" + name +
                                              "' extends past end of file");
            std::vector<double> vals(count);
            if (dtype == "f32") {
                for (std::uint64_t i = 0; i < count; ++i) {
                    float f;
                    std::memcpy(&f, payload.data() + offset + i * 4, 4);
                    vals[i] = static_cast<double>(f);
                }
            } else if (dtype == "f64") {
                std::memcpy(vals.data(), payload.data() + offset, bytes);
            } else {
                throw ContainerError("Container: unsupported dtype '" + dtype + "' in entry '" +
                                     name + "'");
            }
            c.entries_[name] = {Tensor(shape, std::move(vals)), dtype};
        }
        return c;
    }

private:
    std::map<std::string, std::pair<Tensor, std::string>> entries_;
    std::map<std::string, std::string> meta_;
};

}  // namespace stsr
