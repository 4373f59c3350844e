#include "utrack/weights_io.hpp"

#include <fstream>
#include <sstream>

#include "utrack/error.hpp"

namespace utrack {

void save_weights(const ParamStore& store, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("save_weights: cannot write '" + path + "'");
    f << "UTWEIGHTS1\n" << store.count() << "\n";
    for (const auto& [name, arr] : store) {
        f << name << " " << arr.rank();
        for (std::size_t i = 0; i < arr.rank(); ++i) f << " " << arr.extent(i);
        f << " " << arr.size() << "\n";
    }
    f << "DATA\n";
    for (const auto& [name, arr] : store) {
        f.write(reinterpret_cast<const char*>(arr.data().data()),
                static_cast<std::streamsize>(arr.size() * sizeof(double)));
    }
    if (!f) throw InputError("save_weights: write failed for '" + path + "'");
}

ParamStore load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("load_weights: cannot open '" + path + "'");
    std::string magic;
    std::getline(f, magic);
    if (magic != "UTWEIGHTS1") {
        throw InputError("load_weights: '" + path + "' is not a weights file");
    }
    std::size_t count = 0;
    f >> count;
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t elements;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < count; ++i) {
        Entry e;
        std::size_t rank = 0;
        f >> e.name >> rank;
        e.shape.resize(rank);
        for (std::size_t r = 0; r < rank; ++r) f >> e.shape[r];
        f >> e.elements;
        if (!f || shape_product(e.shape) != e.elements) {
            throw InputError("load_weights: corrupt header entry in '" + path + "'");
        }
        entries.push_back(std::move(e));
    }
    std::string line;
    std::getline(f, line);
    std::getline(f, line);
    if (line != "DATA") throw InputError("load_weights: missing DATA marker in '" + path + "'");

    ParamStore store;
    for (const Entry& e : entries) {
        std::vector<double> data(e.elements);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(e.elements * sizeof(double)));
        if (!f) throw InputError("load_weights: truncated data for '" + e.name + "'");
        store.set(e.name, Array(e.shape, std::move(data)));
    }
    return store;
}

}  // namespace utrack
