#include "ems/cime_io.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ems::cime {

const char* to_string(MeasKind k) {
    switch (k) {
        case MeasKind::VoltageMag: return "v";
        case MeasKind::PInjection: return "p_inj";
        case MeasKind::QInjection: return "q_inj";
        case MeasKind::PFlow: return "p_flow";
        case MeasKind::QFlow: return "q_flow";
    }
    return "?";
}

std::optional<MeasKind> meas_kind_from(const std::string& token) {
    if (token == "v") return MeasKind::VoltageMag;
    if (token == "p_inj") return MeasKind::PInjection;
    if (token == "q_inj") return MeasKind::QInjection;
    if (token == "p_flow") return MeasKind::PFlow;
    if (token == "q_flow") return MeasKind::QFlow;
    return std::nullopt;
}

std::map<int, double> GridFile::initial_measurement_values() const {
    std::map<int, double> vals;
    for (const auto& m : measurements) vals[m.id] = m.value.value_or(0.0);
    return vals;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr - buf);
}

struct Token {
    std::string text;
    int column = 0;  // 1-based
};

std::vector<Token> tokenize(const std::string& line) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        if (i >= line.size() || line[i] == '#') break;
        std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r' &&
               line[i] != '#')
            ++i;
        out.push_back({line.substr(start, i - start), static_cast<int>(start) + 1});
    }
    return out;
}

class GridParser {
  public:
    explicit GridParser(const std::string& text) : text_(text) {}

    GridFile parse() {
        std::istringstream is(text_);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto tokens = tokenize(line);
            if (tokens.empty()) continue;
            if (tokens[0].text.size() >= 2 && tokens[0].text.front() == '<' &&
                tokens[0].text.back() == '>') {
                enter_section(tokens[0].text.substr(1, tokens[0].text.size() - 2), lineno,
                              tokens[0].column);
                continue;
            }
            dispatch(tokens, lineno);
        }
        semantic_checks();
        if (had_error_) throw ParseError("grid file has errors", diags_);
        gf_.graph.validate();
        return std::move(gf_);
    }

  private:
    enum class Section { None, Header, Substation, Device, Connection, Switch, Link, Measurement };

    void error(int line, int col, const std::string& msg) {
        diags_.push_back({Diagnostic::Severity::Error, line, col, msg});
        had_error_ = true;
    }

    // First semantic failure aborts immediately with everything collected
    // so far.
    [[noreturn]] void semantic_error(int line, int col, const std::string& msg) {
        diags_.push_back({Diagnostic::Severity::Error, line, col, msg});
        throw ParseError("grid file has errors", diags_);
    }

    void enter_section(const std::string& name, int line, int col) {
        static const std::map<std::string, Section> names = {
            {"HEADER", Section::Header},         {"SUBSTATION", Section::Substation},
            {"DEVICE", Section::Device},         {"CONNECTION", Section::Connection},
            {"SWITCH", Section::Switch},         {"LINK", Section::Link},
            {"MEASUREMENT", Section::Measurement}};
        auto it = names.find(name);
        if (it == names.end()) {
            error(line, col, "unknown section <" + name + ">");
            section_ = Section::None;
            return;
        }
        section_ = it->second;
    }

    bool parse_int(const Token& t, int line, int& out) {
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), out);
        if (ec != std::errc{} || p != t.text.data() + t.text.size()) {
            error(line, t.column, "expected integer, got '" + t.text + "'");
            return false;
        }
        return true;
    }

    bool parse_num(const Token& t, int line, double& out) {
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), out);
        if (ec != std::errc{} || p != t.text.data() + t.text.size()) {
            error(line, t.column, "expected number, got '" + t.text + "'");
            return false;
        }
        return true;
    }

    bool need(const std::vector<Token>& t, int line, std::size_t lo, std::size_t hi,
              const char* what) {
        if (t.size() < lo || t.size() > hi) {
            error(line, t.empty() ? 1 : t.back().column,
                  std::string("expected ") + what + ", got " + std::to_string(t.size()) +
                      " fields");
            return false;
        }
        return true;
    }

    void dispatch(const std::vector<Token>& t, int line) {
        switch (section_) {
            case Section::None:
                error(line, t[0].column, "record outside any section");
                break;
            case Section::Header: {
                if (!need(t, line, 2, 2, "'key value'")) return;
                if (t[0].text == "version") {
                    int v;
                    if (parse_int(t[1], line, v)) gf_.version = v;
                } else if (t[0].text == "mva_base") {
                    double v;
                    if (parse_num(t[1], line, v)) gf_.graph.mva_base = v;
                } else {
                    error(line, t[0].column, "unknown header key '" + t[0].text + "'");
                }
                break;
            }
            case Section::Substation: {
                if (!need(t, line, 1, 2, "'id [name]'")) return;
                model::Substation s;
                if (!parse_int(t[0], line, s.id)) return;
                if (t.size() > 1) s.name = t[1].text;
                line_of_sub_.emplace(s.id, line);
                gf_.graph.substations.push_back(std::move(s));
                break;
            }
            case Section::Device: {
                if (!need(t, line, 3, 7, "'id substation kind [params]'")) return;
                model::Device d;
                if (!parse_int(t[0], line, d.id) || !parse_int(t[1], line, d.substation)) return;
                auto kind = model::device_kind_from(t[2].text);
                if (!kind) {
                    error(line, t[2].column, "unknown device kind '" + t[2].text + "'");
                    return;
                }
                d.kind = *kind;
                switch (d.kind) {
                    case model::DeviceKind::Load:
                        if (!need(t, line, 5, 5, "'id sub load p q'")) return;
                        if (!parse_num(t[3], line, d.p) || !parse_num(t[4], line, d.q)) return;
                        break;
                    case model::DeviceKind::Generator: {
                        if (!need(t, line, 6, 7, "'id sub generator p v_set slack [q]'")) return;
                        int slack;
                        if (!parse_num(t[3], line, d.p) || !parse_num(t[4], line, d.v_set) ||
                            !parse_int(t[5], line, slack))
                            return;
                        d.slack = slack != 0;
                        if (t.size() == 7 && !parse_num(t[6], line, d.q)) return;
                        break;
                    }
                    case model::DeviceKind::Shunt:
                        if (!need(t, line, 4, 4, "'id sub shunt b'")) return;
                        if (!parse_num(t[3], line, d.b)) return;
                        break;
                    default:
                        if (!need(t, line, 3, 3, "'id sub kind'")) return;
                        break;
                }
                line_of_dev_.emplace(d.id, line);
                gf_.graph.devices.push_back(std::move(d));
                break;
            }
            case Section::Connection: {
                if (!need(t, line, 4, 4, "'dev_a term_a dev_b term_b'")) return;
                model::Connection c;
                if (!parse_int(t[0], line, c.dev_a) || !parse_int(t[1], line, c.term_a) ||
                    !parse_int(t[2], line, c.dev_b) || !parse_int(t[3], line, c.term_b))
                    return;
                conn_lines_.push_back(line);
                gf_.graph.connections.push_back(c);
                break;
            }
            case Section::Switch: {
                if (!need(t, line, 2, 2, "'device open|closed'")) return;
                int dev;
                if (!parse_int(t[0], line, dev)) return;
                model::SwitchStatus st;
                if (t[1].text == "open" || t[1].text == "0")
                    st = model::SwitchStatus::Open;
                else if (t[1].text == "closed" || t[1].text == "1")
                    st = model::SwitchStatus::Closed;
                else {
                    error(line, t[1].column, "expected open|closed, got '" + t[1].text + "'");
                    return;
                }
                switch_lines_.emplace_back(dev, line);
                gf_.graph.switch_status[dev] = st;
                break;
            }
            case Section::Link: {
                if (!need(t, line, 8, 9, "'id dev_from dev_to r x b tap rate [in|out]'")) return;
                model::LineLink l;
                if (!parse_int(t[0], line, l.id) || !parse_int(t[1], line, l.dev_from) ||
                    !parse_int(t[2], line, l.dev_to) || !parse_num(t[3], line, l.r) ||
                    !parse_num(t[4], line, l.x) || !parse_num(t[5], line, l.b) ||
                    !parse_num(t[6], line, l.tap) || !parse_num(t[7], line, l.rate))
                    return;
                if (t.size() == 9) {
                    if (t[8].text == "in")
                        l.in_service = true;
                    else if (t[8].text == "out")
                        l.in_service = false;
                    else {
                        error(line, t[8].column, "expected in|out, got '" + t[8].text + "'");
                        return;
                    }
                }
                line_of_link_.emplace(l.id, line);
                gf_.graph.links.push_back(std::move(l));
                break;
            }
            case Section::Measurement: {
                if (!need(t, line, 4, 6, "'id kind location sigma [value]'")) return;
                MeasurementDef m;
                if (!parse_int(t[0], line, m.id)) return;
                auto kind = meas_kind_from(t[1].text);
                if (!kind) {
                    error(line, t[1].column, "unknown measurement kind '" + t[1].text + "'");
                    return;
                }
                m.kind = *kind;
                bool is_flow = m.kind == MeasKind::PFlow || m.kind == MeasKind::QFlow;
                std::size_t next = 2;
                if (is_flow) {
                    if (!need(t, line, 5, 6, "'id kind link from|to sigma [value]'")) return;
                    if (!parse_int(t[2], line, m.branch)) return;
                    if (t[3].text == "from")
                        m.at_from = true;
                    else if (t[3].text == "to")
                        m.at_from = false;
                    else {
                        error(line, t[3].column, "expected from|to, got '" + t[3].text + "'");
                        return;
                    }
                    next = 4;
                } else {
                    if (!parse_int(t[2], line, m.device)) return;
                    next = 3;
                }
                if (t.size() <= next) {
                    error(line, t.back().column, "missing sigma");
                    return;
                }
                // "-" picks the default meter class: 0.004 for voltage,
                // 0.01 for flows and injections.
                if (t[next].text == "-")
                    m.sigma = m.kind == MeasKind::VoltageMag ? 0.004 : 0.01;
                else if (!parse_num(t[next], line, m.sigma))
                    return;
                ++next;
                if (t.size() > next) {
                    double v;
                    if (!parse_num(t[next], line, v)) return;
                    m.value = v;
                }
                line_of_meas_.emplace(m.id, line);
                gf_.measurements.push_back(std::move(m));
                break;
            }
        }
    }

    template <typename Map>
    void check_duplicates(const Map& lines, const char* what) {
        std::map<int, int> first;
        for (const auto& [id, line] : lines) {
            auto [it, inserted] = first.emplace(id, line);
            if (!inserted)
                semantic_error(line, 1,
                               std::string("duplicate ") + what + " id " + std::to_string(id) +
                                   " (first defined at line " + std::to_string(it->second) + ")");
        }
    }

    void semantic_checks() {
        if (had_error_) return;  // report syntax errors without piling on
        check_duplicates(line_of_sub_, "substation");
        check_duplicates(line_of_dev_, "device");
        check_duplicates(line_of_link_, "link");
        check_duplicates(line_of_meas_, "measurement");

        std::set<int> subs;
        for (const auto& s : gf_.graph.substations) subs.insert(s.id);
        std::map<int, const model::Device*> devs;
        for (const auto& d : gf_.graph.devices) devs[d.id] = &d;

        for (const auto& d : gf_.graph.devices) {
            int line = line_of_dev_.find(d.id)->second;
            if (!subs.count(d.substation))
                semantic_error(line, 1,
                               "device " + std::to_string(d.id) +
                                   " references unknown substation " +
                                   std::to_string(d.substation));
        }
        for (std::size_t i = 0; i < gf_.graph.connections.size(); ++i) {
            const auto& c = gf_.graph.connections[i];
            int line = conn_lines_[i];
            for (auto [dev, term] : {std::pair{c.dev_a, c.term_a}, std::pair{c.dev_b, c.term_b}}) {
                auto it = devs.find(dev);
                if (it == devs.end())
                    semantic_error(line, 1,
                                   "connection references unknown device " + std::to_string(dev));
                if (term < 0 || term >= model::terminal_count(it->second->kind))
                    semantic_error(line, 1,
                                   "device " + std::to_string(dev) + " has no terminal " +
                                       std::to_string(term));
            }
            if (devs.at(c.dev_a)->substation != devs.at(c.dev_b)->substation)
                semantic_error(line, 1, "connection spans substations");
        }
        for (const auto& [dev, line] : switch_lines_) {
            auto it = devs.find(dev);
            if (it == devs.end() || !model::is_switch(it->second->kind))
                semantic_error(line, 1,
                               "switch status for unknown or non-switch device " +
                                   std::to_string(dev));
        }
        for (const auto& d : gf_.graph.devices) {
            if (model::is_switch(d.kind) && !gf_.graph.switch_status.count(d.id))
                semantic_error(line_of_dev_.find(d.id)->second, 1,
                               "switch device " + std::to_string(d.id) + " has no status record");
        }
        std::set<int> links;
        for (const auto& l : gf_.graph.links) {
            int line = line_of_link_.find(l.id)->second;
            links.insert(l.id);
            for (int dev : {l.dev_from, l.dev_to}) {
                auto it = devs.find(dev);
                if (it == devs.end())
                    semantic_error(line, 1,
                                   "link " + std::to_string(l.id) + " references unknown device " +
                                       std::to_string(dev));
                auto k = it->second->kind;
                if (k != model::DeviceKind::LineTerminal &&
                    k != model::DeviceKind::TransformerWinding)
                    semantic_error(line, 1,
                                   "link " + std::to_string(l.id) + " endpoint " +
                                       std::to_string(dev) + " is not a line/transformer terminal");
            }
            if (devs.at(l.dev_from)->substation == devs.at(l.dev_to)->substation)
                semantic_error(line, 1,
                               "link " + std::to_string(l.id) +
                                   " endpoints lie in the same substation");
            if (l.x == 0.0)
                semantic_error(line, 1, "link " + std::to_string(l.id) + " has zero reactance");
        }
        for (const auto& m : gf_.measurements) {
            int line = line_of_meas_.find(m.id)->second;
            if (m.sigma <= 0.0)
                semantic_error(line, 1,
                               "measurement " + std::to_string(m.id) + " has sigma <= 0");
            if (m.kind == MeasKind::PFlow || m.kind == MeasKind::QFlow) {
                if (!links.count(m.branch))
                    semantic_error(line, 1,
                                   "measurement " + std::to_string(m.id) +
                                       " references unknown link " + std::to_string(m.branch));
            } else {
                auto it = devs.find(m.device);
                if (it == devs.end() || model::is_switch(it->second->kind))
                    semantic_error(line, 1,
                                   "measurement " + std::to_string(m.id) +
                                       " references unknown or switch device " +
                                       std::to_string(m.device));
            }
        }
    }

    const std::string& text_;
    GridFile gf_;
    Section section_ = Section::None;
    std::vector<Diagnostic> diags_;
    bool had_error_ = false;
    std::multimap<int, int> line_of_sub_, line_of_dev_, line_of_link_, line_of_meas_;
    std::vector<int> conn_lines_;
    std::vector<std::pair<int, int>> switch_lines_;
};

}  // namespace

GridFile parse_grid(const std::string& text) {
    return GridParser(text).parse();
}

std::string serialize_grid(const GridFile& gf) {
    std::ostringstream os;
    const auto& g = gf.graph;
    os << "<HEADER>\n";
    os << "version " << gf.version << "\n";
    os << "mva_base " << fmt(g.mva_base) << "\n";

    auto subs = g.substations;
    std::sort(subs.begin(), subs.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    os << "\n<SUBSTATION>\n";
    for (const auto& s : subs) {
        os << s.id;
        if (!s.name.empty()) os << " " << s.name;
        os << "\n";
    }

    auto devs = g.devices;
    std::sort(devs.begin(), devs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    os << "\n<DEVICE>\n";
    for (const auto& d : devs) {
        os << d.id << " " << d.substation << " " << model::to_string(d.kind);
        switch (d.kind) {
            case model::DeviceKind::Load:
                os << " " << fmt(d.p) << " " << fmt(d.q);
                break;
            case model::DeviceKind::Generator:
                os << " " << fmt(d.p) << " " << fmt(d.v_set) << " " << (d.slack ? 1 : 0) << " "
                   << fmt(d.q);
                break;
            case model::DeviceKind::Shunt:
                os << " " << fmt(d.b);
                break;
            default:
                break;
        }
        os << "\n";
    }

    os << "\n<CONNECTION>\n";
    auto conns = g.connections;
    std::sort(conns.begin(), conns.end(), [](const auto& a, const auto& b) {
        return std::tie(a.dev_a, a.term_a, a.dev_b, a.term_b) <
               std::tie(b.dev_a, b.term_a, b.dev_b, b.term_b);
    });
    for (const auto& c : conns)
        os << c.dev_a << " " << c.term_a << " " << c.dev_b << " " << c.term_b << "\n";

    os << "\n<SWITCH>\n";
    for (const auto& [dev, st] : g.switch_status)
        os << dev << " " << (st == model::SwitchStatus::Closed ? "closed" : "open") << "\n";

    auto links = g.links;
    std::sort(links.begin(), links.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    os << "\n<LINK>\n";
    for (const auto& l : links) {
        os << l.id << " " << l.dev_from << " " << l.dev_to << " " << fmt(l.r) << " " << fmt(l.x)
           << " " << fmt(l.b) << " " << fmt(l.tap) << " " << fmt(l.rate) << " "
           << (l.in_service ? "in" : "out") << "\n";
    }

    if (!gf.measurements.empty()) {
        auto meas = gf.measurements;
        std::sort(meas.begin(), meas.end(),
                  [](const auto& a, const auto& b) { return a.id < b.id; });
        os << "\n<MEASUREMENT>\n";
        for (const auto& m : meas) {
            os << m.id << " " << to_string(m.kind) << " ";
            if (m.kind == MeasKind::PFlow || m.kind == MeasKind::QFlow)
                os << m.branch << " " << (m.at_from ? "from" : "to");
            else
                os << m.device;
            os << " " << fmt(m.sigma);
            if (m.value) os << " " << fmt(*m.value);
            os << "\n";
        }
    }
    return os.str();
}

namespace {

void parse_delta_record(const std::vector<Token>& t, int lineno,
                        std::vector<model::SnapshotDelta>& out, std::vector<Diagnostic>& diags) {
    auto fail = [&](int col, const std::string& msg) {
        diags.push_back({Diagnostic::Severity::Error, lineno, col, msg});
    };
    if (t.size() < 4) {
        fail(t.empty() ? 1 : t.back().column, "expected 't KIND id value'");
        return;
    }
    std::int64_t ts;
    {
        auto [p, ec] = std::from_chars(t[0].text.data(), t[0].text.data() + t[0].text.size(), ts);
        if (ec != std::errc{} || p != t[0].text.data() + t[0].text.size()) {
            fail(t[0].column, "expected timestamp, got '" + t[0].text + "'");
            return;
        }
    }
    if (!out.empty() && ts < out.back().t) {
        fail(t[0].column, "non-monotone timestamp " + std::to_string(ts) + " after " +
                              std::to_string(out.back().t));
        return;
    }
    int id;
    {
        auto [p, ec] = std::from_chars(t[2].text.data(), t[2].text.data() + t[2].text.size(), id);
        if (ec != std::errc{} || p != t[2].text.data() + t[2].text.size()) {
            fail(t[2].column, "expected id, got '" + t[2].text + "'");
            return;
        }
    }
    auto num = [&](const Token& tok, double& v) {
        auto [p, ec] = std::from_chars(tok.text.data(), tok.text.data() + tok.text.size(), v);
        if (ec != std::errc{} || p != tok.text.data() + tok.text.size()) {
            fail(tok.column, "expected number, got '" + tok.text + "'");
            return false;
        }
        return true;
    };

    if (out.empty() || out.back().t != ts) {
        model::SnapshotDelta d;
        d.t = ts;
        out.push_back(std::move(d));
    }
    model::SnapshotDelta& d = out.back();

    const std::string& kind = t[1].text;
    if (kind == "SWITCH") {
        model::SwitchStatus st;
        if (t[3].text == "open" || t[3].text == "0")
            st = model::SwitchStatus::Open;
        else if (t[3].text == "closed" || t[3].text == "1")
            st = model::SwitchStatus::Closed;
        else {
            fail(t[3].column, "expected open|closed, got '" + t[3].text + "'");
            return;
        }
        d.switch_changes.emplace_back(id, st);
    } else if (kind == "MEAS") {
        double v;
        if (!num(t[3], v)) return;
        d.measurement_updates.emplace_back(id, v);
    } else if (kind == "INJ") {
        model::SnapshotDelta::Injection inj;
        inj.device = id;
        if (!num(t[3], inj.p)) return;
        if (t.size() > 4) {
            double q;
            if (!num(t[4], q)) return;
            inj.q = q;
        }
        d.injection_updates.push_back(std::move(inj));
    } else {
        fail(t[1].column, "unknown record kind '" + kind + "'");
    }
}

}  // namespace

std::vector<model::SnapshotDelta> parse_delta_stream(const std::string& text) {
    std::vector<model::SnapshotDelta> out;
    std::vector<Diagnostic> diags;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto tokens = tokenize(line);
        if (tokens.empty()) continue;
        if (tokens[0].text == "END") break;
        parse_delta_record(tokens, lineno, out, diags);
    }
    if (!diags.empty()) throw ParseError("delta stream has errors", diags);
    return out;
}

std::string serialize_delta_group(const model::SnapshotDelta& d) {
    std::ostringstream os;
    for (const auto& [dev, st] : d.switch_changes)
        os << d.t << " SWITCH " << dev << " "
           << (st == model::SwitchStatus::Closed ? "closed" : "open") << "\n";
    for (const auto& [id, v] : d.measurement_updates) os << d.t << " MEAS " << id << " " << fmt(v) << "\n";
    for (const auto& inj : d.injection_updates) {
        os << d.t << " INJ " << inj.device << " " << fmt(inj.p);
        if (inj.q) os << " " << fmt(*inj.q);
        os << "\n";
    }
    return os.str();
}

std::string serialize_deltas(const std::vector<model::SnapshotDelta>& deltas) {
    std::string out;
    for (const auto& d : deltas) out += serialize_delta_group(d);
    return out;
}

GridFile load_grid_file(const std::string& path) {
    return parse_grid(read_text_file(path));
}

std::vector<model::SnapshotDelta> load_delta_file(const std::string& path) {
    return parse_delta_stream(read_text_file(path));
}

// --- replay over a stream socket ---

ReplayServer::ReplayServer(std::vector<model::SnapshotDelta> deltas, int pace_ms)
    : pace_ms_(pace_ms) {
    // Empty deltas have no wire representation and are skipped; a parsed
    // stream never contains one.
    for (const auto& d : deltas) {
        std::string g = serialize_delta_group(d);
        if (!g.empty()) groups_.emplace_back(d.t, std::move(g));
    }
}

ReplayServer::~ReplayServer() {
    stop();
}

int ReplayServer::start(const std::string& host, int port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("replay server: socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw IoError("replay server: bad host " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw IoError("replay server: bind failed on " + host + ":" + std::to_string(port));
    }
    if (::listen(listen_fd_, 1) != 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw IoError("replay server: listen failed");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    thread_ = std::thread([this] { run(); });
    return ntohs(bound.sin_port);
}

void ReplayServer::run() {
    while (!stop_ && !done_) {
        int client = ::accept(listen_fd_, nullptr, nullptr);
        if (client < 0) {
            if (stop_) break;
            continue;
        }
        ++sessions_;
        timeval timeout{5, 0};  // a stuck client must not wedge stop()
        ::setsockopt(client, SOL_SOCKET, SO_RCVTIMEO, &timeout, sizeof timeout);

        // Session handshake: "RESUME <last committed t>".
        std::int64_t resume_after = -1;
        {
            std::string hello;
            char c;
            bool ok = false;
            while (hello.size() < 256) {
                ssize_t n = ::recv(client, &c, 1, 0);
                if (n <= 0) break;
                if (c == '\n') {
                    ok = true;
                    break;
                }
                hello.push_back(c);
            }
            if (!ok || hello.rfind("RESUME ", 0) != 0 ||
                std::from_chars(hello.data() + 7, hello.data() + hello.size(), resume_after)
                        .ec != std::errc{}) {
                ::close(client);
                continue;
            }
        }

        bool failed = false;
        for (const auto& [t, payload] : groups_) {
            if (t <= resume_after) continue;
            std::size_t sent = 0;
            while (sent < payload.size()) {
                ssize_t n = ::send(client, payload.data() + sent, payload.size() - sent,
                                   MSG_NOSIGNAL);
                if (n <= 0) {
                    failed = true;
                    break;
                }
                sent += static_cast<std::size_t>(n);
            }
            if (failed) break;
            if (pace_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(pace_ms_));
        }
        if (!failed) {
            const char end_line[] = "END\n";
            if (::send(client, end_line, sizeof end_line - 1, MSG_NOSIGNAL) ==
                static_cast<ssize_t>(sizeof end_line - 1)) {
                // A clean FIN after END means the client committed the
                // whole stream; an abort (reset) keeps the server alive.
                char sink[64];
                for (;;) {
                    ssize_t n = ::recv(client, sink, sizeof sink, 0);
                    if (n == 0) {
                        done_ = true;
                        break;
                    }
                    if (n < 0) break;
                }
            }
        }
        ::close(client);
    }
}

void ReplayServer::stop() {
    stop_ = true;
    if (listen_fd_ >= 0) {
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
    if (thread_.joinable()) thread_.join();
}

bool ReplayServer::finished() const {
    return done_;
}

int ReplayServer::sessions_served() const {
    return sessions_;
}

ReplayClient::ReplayClient(std::string host, int port) : host_(std::move(host)), port_(port) {}

void ReplayClient::commit_pending() {
    if (!have_pending_) return;
    if (pending_t_ > last_committed_t_) {
        for (auto& l : pending_) committed_.push_back(std::move(l));
        last_committed_t_ = pending_t_;
    }
    pending_.clear();
    have_pending_ = false;
}

bool ReplayClient::consume_session(long byte_limit) {
    if (complete_) return true;

    int fd = -1;
    for (int attempt = 0; attempt < 100; ++attempt) {
        fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw IoError("replay client: socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(static_cast<uint16_t>(port_));
        if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1)
            throw IoError("replay client: bad host " + host_);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) break;
        ::close(fd);
        fd = -1;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (fd < 0) throw IoError("replay client: cannot connect to " + host_ + ":" +
                              std::to_string(port_));

    {
        const std::string hello = "RESUME " + std::to_string(last_committed_t_) + "\n";
        if (::send(fd, hello.data(), hello.size(), MSG_NOSIGNAL) !=
            static_cast<ssize_t>(hello.size())) {
            ::close(fd);
            return false;
        }
    }

    // A fresh session starts a fresh group buffer; the server re-sends
    // everything after the committed timestamp anyway.
    pending_.clear();
    have_pending_ = false;

    std::string buf;
    char chunk[4096];
    long received = 0;
    bool aborted = false;
    while (!complete_) {
        long want = sizeof chunk;
        if (byte_limit >= 0) {
            if (received >= byte_limit) {
                aborted = true;
                break;
            }
            want = std::min<long>(want, byte_limit - received);
        }
        ssize_t n = ::recv(fd, chunk, static_cast<std::size_t>(want), 0);
        if (n <= 0) break;  // peer closed or error: drop uncommitted group
        received += n;
        buf.append(chunk, static_cast<std::size_t>(n));
        std::size_t pos;
        while ((pos = buf.find('\n')) != std::string::npos) {
            std::string line = buf.substr(0, pos);
            buf.erase(0, pos + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line == "END") {
                commit_pending();
                complete_ = true;
                break;
            }
            std::int64_t t = 0;
            auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), t);
            if (ec != std::errc{} || p == line.data()) continue;  // not a record line
            if (have_pending_ && t != pending_t_) commit_pending();
            if (t <= last_committed_t_) continue;  // duplicate after a resume
            pending_t_ = t;
            have_pending_ = true;
            pending_.push_back(std::move(line));
        }
    }
    if (aborted) {
        // Reset instead of FIN so the server can tell an abort from a
        // completed consumer.
        linger lg{1, 0};
        ::setsockopt(fd, SOL_SOCKET, SO_LINGER, &lg, sizeof lg);
    } else {
        ::shutdown(fd, SHUT_WR);
    }
    ::close(fd);
    if (aborted || !complete_) {
        pending_.clear();
        have_pending_ = false;
    }
    return complete_;
}

std::vector<model::SnapshotDelta> ReplayClient::deltas() const {
    std::string all;
    for (const auto& l : committed_) all += l + "\n";
    return parse_delta_stream(all);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << content;
    if (!os) throw IoError("write failed on " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace ems::cime
