#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <fstream>
#include <regex>
#include <sstream>

#include "fsdet/datasets.hpp"

namespace fsdet::data {

namespace pt = boost::property_tree;

ParsedAnnotations parse_voc_xml(const std::string& path) {
    pt::ptree tree;
    try {
        pt::read_xml(path, tree);
    } catch (const pt::xml_parser_error& e) {
        throw ParseError("parse_voc_xml: " + std::string(e.what()));
    }
    const auto root = tree.get_child_optional("annotation");
    if (!root) throw ParseError("parse_voc_xml: missing element 'annotation'");

    ParsedAnnotations out;
    out.width = root->get<std::int64_t>("size.width", -1);
    out.height = root->get<std::int64_t>("size.height", -1);

    std::int64_t index = 0;
    for (const auto& [key, node] : *root) {
        if (key != "object") continue;
        const std::string where = "annotation.object[" + std::to_string(index) + "]";
        ParsedObject obj;
        const auto name = node.get_optional<std::string>("name");
        if (!name) throw ParseError("parse_voc_xml: missing element " + where + ".name");
        obj.class_name = *name;
        const auto bnd = node.get_child_optional("bndbox");
        if (!bnd) throw ParseError("parse_voc_xml: missing element " + where + ".bndbox");
        auto coord = [&](const char* field) {
            const auto v = bnd->get_optional<double>(field);
            if (!v) {
                throw ParseError("parse_voc_xml: missing element " + where + ".bndbox." + field);
            }
            return *v;
        };
        const double xmin = coord("xmin"), ymin = coord("ymin");
        const double xmax = coord("xmax"), ymax = coord("ymax");
        if (xmax <= xmin || ymax <= ymin) {
            throw ParseError("parse_voc_xml: degenerate box in " + where + " ('" + obj.class_name +
                             "'): xmax/ymax must exceed xmin/ymin");
        }
        // VOC coordinates are 1-indexed inclusive pixels.
        obj.box = {xmin - 1.0, ymin - 1.0, xmax, ymax};
        out.objects.push_back(std::move(obj));
        ++index;
    }
    return out;
}

ParsedAnnotations parse_nwpu(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("parse_nwpu: cannot open " + path);
    static const std::regex line_re(
        R"(^\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*,\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*,\s*(\d+)\s*$)");

    ParsedAnnotations out;
    const auto catalogue = nwpu_catalogue();
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        bool blank = true;
        for (char c : line) {
            if (!std::isspace(static_cast<unsigned char>(c))) {
                blank = false;
                break;
            }
        }
        if (blank) continue;
        std::smatch m;
        if (!std::regex_match(line, m, line_re)) {
            throw ParseError("parse_nwpu: malformed line " + std::to_string(line_no) + ": '" + line +
                             "'");
        }
        ParsedObject obj;
        obj.box = {std::stod(m[1]), std::stod(m[2]), std::stod(m[3]), std::stod(m[4])};
        if (obj.box.x2 <= obj.box.x1 || obj.box.y2 <= obj.box.y1) {
            throw ParseError("parse_nwpu: degenerate box at line " + std::to_string(line_no) +
                             ": x2/y2 must exceed x1/y1");
        }
        obj.class_id = std::stoll(m[5]);
        if (obj.class_id >= 1 &&
            obj.class_id <= static_cast<std::int64_t>(catalogue.size())) {
            obj.class_name = catalogue[static_cast<std::size_t>(obj.class_id - 1)];
        }
        out.objects.push_back(std::move(obj));
    }
    return out;
}

}  // namespace fsdet::data
