#pragma once

// Checkpoint container:
//
//   moonbeam-checkpoint 1
//   meta <key> <value>                       (zero or more)
//   tensor <name> <f32|f64> <d0,d1,...> <offset> <nbytes>
//   end
//   <payload: little-endian tensor data, offsets relative to payload start>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "moonbeam/errors.hpp"
#include "moonbeam/tensor.hpp"

namespace moonbeam {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr int kCheckpointVersion = 1;

class Checkpoint {
public:
    struct Entry {
        std::string name;
        DType dtype = DType::f32;
        Shape shape;
        std::vector<std::uint8_t> bytes;
    };

    std::map<std::string, std::string> meta;

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        check_name(name);
        Entry e{name, dtype_of<T>(), t.shape(), {}};
        e.bytes.resize(t.numel() * sizeof(T));
        std::memcpy(e.bytes.data(), t.values().data(), e.bytes.size());
        if (auto it = index_.find(name); it != index_.end()) {
            entries_[it->second] = std::move(e);
        } else {
            index_[name] = entries_.size();
            entries_.push_back(std::move(e));
        }
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<Entry>& entries() const { return entries_; }

    // Loads a tensor, converting between f32 and f64 when needed.
    template <class T>
    Tensor<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InputError("checkpoint has no tensor named '" + name + "'");
        const Entry& e = entries_[it->second];
        std::vector<T> values(numel(e.shape));
        if (e.dtype == DType::f32) {
            std::vector<float> raw(values.size());
            std::memcpy(raw.data(), e.bytes.data(), e.bytes.size());
            std::copy(raw.begin(), raw.end(), values.begin());
        } else {
            std::vector<double> raw(values.size());
            std::memcpy(raw.data(), e.bytes.data(), e.bytes.size());
            std::copy(raw.begin(), raw.end(), values.begin());
        }
        return Tensor<T>::from(e.shape, std::move(values));
    }

    // Copies a stored tensor into an existing one of identical shape.
    template <class T>
    void load_into(const std::string& name, Tensor<T>& target) const {
        Tensor<T> src = get<T>(name);
        if (src.shape() != target.shape()) {
            throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                             shape_str(target.shape()));
        }
        std::copy(src.values().begin(), src.values().end(), target.values().begin());
    }

    void write(std::ostream& out) const {
        out << "moonbeam-checkpoint " << kCheckpointVersion << '\n';
        for (const auto& [k, v] : meta) {
            check_name(k);
            if (v.find('\n') != std::string::npos) throw InputError("checkpoint meta value contains a newline");
            out << "meta " << k << ' ' << v << '\n';
        }
        std::size_t offset = 0;
        for (const Entry& e : entries_) {
            out << "tensor " << e.name << ' ' << dtype_name(e.dtype) << ' ';
            for (std::size_t i = 0; i < e.shape.size(); ++i) out << (i ? "," : "") << e.shape[i];
            out << ' ' << offset << ' ' << e.bytes.size() << '\n';
            offset += e.bytes.size();
        }
        out << "end\n";
        for (const Entry& e : entries_) out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }

    static Checkpoint read(std::istream& in) {
        Checkpoint ck;
        std::string line;
        if (!std::getline(in, line)) throw InputError("empty checkpoint");
        {
            std::istringstream ls(line);
            std::string magic;
            int version = 0;
            if (!(ls >> magic >> version) || magic != "moonbeam-checkpoint") throw InputError("not a checkpoint file");
            if (version != kCheckpointVersion) {
                throw InputError("unsupported checkpoint version " + std::to_string(version));
            }
        }
        struct Pending {
            std::size_t offset, nbytes;
        };
        std::vector<Pending> pending;
        while (true) {
            if (!std::getline(in, line)) throw InputError("checkpoint manifest not terminated by 'end'");
            if (line == "end") break;
            std::istringstream ls(line);
            std::string kind;
            ls >> kind;
            if (kind == "meta") {
                std::string key, value;
                ls >> key;
                std::getline(ls >> std::ws, value);
                ck.meta[key] = value;
            } else if (kind == "tensor") {
                Entry e;
                std::string dtype, dims;
                Pending p{};
                if (!(ls >> e.name >> dtype >> dims >> p.offset >> p.nbytes)) {
                    throw InputError("bad checkpoint manifest line: '" + line + "'");
                }
                e.dtype = dtype == "f32" ? DType::f32 : dtype == "f64" ? DType::f64 : throw InputError("bad dtype " + dtype);
                std::istringstream ds(dims);
                std::string d;
                while (std::getline(ds, d, ',')) e.shape.push_back(std::stoul(d));
                const std::size_t width = e.dtype == DType::f32 ? 4 : 8;
                if (numel(e.shape) * width != p.nbytes) {
                    throw InputError("checkpoint tensor '" + e.name + "' byte count does not match its shape");
                }
                ck.index_[e.name] = ck.entries_.size();
                ck.entries_.push_back(std::move(e));
                pending.push_back(p);
            } else {
                throw InputError("bad checkpoint manifest line: '" + line + "'");
            }
        }
        std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        for (std::size_t i = 0; i < pending.size(); ++i) {
            if (pending[i].offset + pending[i].nbytes > payload.size()) {
                throw InputError("checkpoint payload truncated for '" + ck.entries_[i].name + "'");
            }
            auto& bytes = ck.entries_[i].bytes;
            bytes.resize(pending[i].nbytes);
            std::memcpy(bytes.data(), payload.data() + pending[i].offset, pending[i].nbytes);
        }
        return ck;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw InputError("cannot open '" + path + "' for writing");
        write(f);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw InputError("cannot open checkpoint '" + path + "'");
        return read(f);
    }

private:
    static void check_name(const std::string& name) {
        if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
            throw InputError("invalid checkpoint name '" + name + "'");
        }
    }

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

} // namespace moonbeam
