// Regenerates data/shape_catalog.json from the builtin table.
#include <fstream>
#include <iostream>

#include "wlora/catalog.hpp"

int main(int argc, char** argv) {
    const std::string path = argc > 1 ? argv[1] : "data/shape_catalog.json";
    std::ofstream out(path);
    if (!out) {
        std::cerr << "cannot open " << path << "\n";
        return 1;
    }
    out << wlora::detail_catalog::builtin_json().dump(2) << "\n";
    return 0;
}
