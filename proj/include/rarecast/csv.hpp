#pragma once

// Line-oriented CSV output with a fixed column order and reals at 17
// significant digits, so identical runs produce identical bytes. A small
// reader and a plain-text table renderer round out the tooling.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rarecast::csv {

inline std::string real17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class Writer {
  public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot write " + path);
    }

    void header(const std::vector<std::string>& names) { line(names); }

    void line(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
        out_.flush();
    }

  private:
    std::ofstream out_;
};

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline Table read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Table t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            t.rows.push_back(std::move(cells));
        }
    }
    return t;
}

inline double cell_real(const Table& t, std::size_t row, const std::string& column) {
    for (std::size_t c = 0; c < t.header.size(); ++c)
        if (t.header[c] == column) return std::stod(t.rows.at(row).at(c));
    throw std::runtime_error("no column named " + column);
}

/// Fixed-width rendering for terminals; numbers are shortened to 6
/// significant digits for readability.
inline std::string render(const Table& t) {
    auto shorten = [](const std::string& cell) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(cell, &pos);
            if (pos == cell.size()) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.6g", v);
                return std::string(buf);
            }
        } catch (...) {
        }
        return cell;
    };
    std::vector<std::vector<std::string>> grid;
    grid.push_back(t.header);
    for (const auto& r : t.rows) {
        grid.emplace_back();
        for (const auto& c : r) grid.back().push_back(shorten(c));
    }
    std::vector<std::size_t> widths;
    for (const auto& row : grid)
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (widths.size() <= c) widths.push_back(0);
            widths[c] = std::max(widths[c], row[c].size());
        }
    std::ostringstream out;
    for (const auto& row : grid) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out << "  ";
            out << row[c] << std::string(widths[c] - row[c].size(), ' ');
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace rarecast::csv
