#include "maskvid/synthset.hpp"

#include <algorithm>
#include <random>
#include <string>

#include "maskvid/error.hpp"

namespace maskvid {

namespace {

int margin_cells(int margin_px, int cell) { return (margin_px + cell - 1) / cell; }

struct Bounds {
    int lo_x, hi_x, lo_y, hi_y;
};

Bounds center_bounds(const SceneSpec& scene, int radius) {
    const int m = margin_cells(scene.margin, scene.cell);
    return {radius + m, scene.grid_width() - 1 - radius - m, radius + m, scene.grid_height() - 1 - radius - m};
}

int reflect(int p, int& v, int lo, int hi) {
    if (p > hi) {
        p = 2 * hi - p;
        v = -v;
    } else if (p < lo) {
        p = 2 * lo - p;
        v = -v;
    }
    return p;
}

bool path_inside(const std::vector<std::pair<int, int>>& path, const Bounds& b) {
    return std::all_of(path.begin(), path.end(), [&](const auto& p) {
        return p.first >= b.lo_x && p.first <= b.hi_x && p.second >= b.lo_y && p.second <= b.hi_y;
    });
}

const std::vector<std::string>& noun_choices(Shape s) {
    static const std::vector<std::string> circle{"circle", "ball"};
    static const std::vector<std::string> square{"square", "box"};
    static const std::vector<std::string> triangle{"triangle", "kite"};
    switch (s) {
        case Shape::circle: return circle;
        case Shape::square: return square;
        case Shape::triangle: return triangle;
    }
    return circle;
}

std::vector<std::pair<int, int>> frame0_cells(const ObjectSpec& o) {
    std::vector<std::pair<int, int>> cells;
    for (int dy = -o.radius; dy <= o.radius; ++dy) {
        for (int dx = -o.radius; dx <= o.radius; ++dx) {
            if (shape_covers(o.shape, o.radius, dx, dy)) cells.emplace_back(o.cx + dx, o.cy + dy);
        }
    }
    return cells;
}

}  // namespace

const std::vector<NamedColor>& color_table() {
    static const std::vector<NamedColor> table{
        {"black", {-1.0, -1.0, -1.0}},  {"white", {1.0, 1.0, 1.0}},    {"red", {1.0, -1.0, -1.0}},
        {"green", {-1.0, 1.0, -1.0}},   {"blue", {-1.0, -1.0, 1.0}},   {"yellow", {1.0, 1.0, -1.0}},
        {"cyan", {-1.0, 1.0, 1.0}},     {"magenta", {1.0, -1.0, 1.0}}, {"gray", {0.0, 0.0, 0.0}},
        {"orange", {1.0, 0.0, -1.0}},
    };
    return table;
}

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
    }
    return "circle";
}

Shape shape_from_name(const std::string& name) {
    if (name == "circle") return Shape::circle;
    if (name == "square") return Shape::square;
    if (name == "triangle") return Shape::triangle;
    throw FormatError("unknown shape '" + name + "'");
}

const char* motion_name(MotionKind k) {
    switch (k) {
        case MotionKind::still: return "static";
        case MotionKind::translate: return "translate";
        case MotionKind::bounce: return "bounce";
    }
    return "static";
}

MotionKind motion_from_name(const std::string& name) {
    if (name == "static") return MotionKind::still;
    if (name == "translate") return MotionKind::translate;
    if (name == "bounce") return MotionKind::bounce;
    throw FormatError("unknown motion '" + name + "'");
}

bool shape_covers(Shape shape, int radius, int dx, int dy) {
    if (dx < -radius || dx > radius || dy < -radius || dy > radius) return false;
    switch (shape) {
        case Shape::circle: return dx * dx + dy * dy <= radius * radius;
        case Shape::square: return true;
        case Shape::triangle: return 2 * std::abs(dx) <= dy + radius;  // apex up
    }
    return false;
}

void GeneratorConfig::validate() const {
    if (height < 16 || width < 16) throw GenerationError("generator canvas must be at least 16x16");
    if (frames < 2) throw GenerationError("generator needs at least 2 frames");
    if (cell < 1 || height % cell != 0 || width % cell != 0) {
        throw GenerationError("canvas not divisible by render cell " + std::to_string(cell));
    }
    if (min_objects < 1 || max_objects < min_objects) throw GenerationError("invalid object count range");
    if (min_radius < 0 || max_radius < min_radius) throw GenerationError("invalid radius range");
    if (max_speed < 1) throw GenerationError("max_speed must be positive");
    if (motion.still < 0 || motion.translate < 0 || motion.bounce < 0 ||
        motion.still + motion.translate + motion.bounce <= 0) {
        throw GenerationError("motion weights must be non-negative with a positive sum");
    }
    if (static_cast<std::size_t>(max_objects) + 1 > color_table().size()) {
        throw GenerationError("more objects than distinct colors");
    }
}

std::vector<std::pair<int, int>> object_path(const ObjectSpec& o, const SceneSpec& scene) {
    std::vector<std::pair<int, int>> path;
    path.reserve(scene.frames);
    int x = o.cx, y = o.cy;
    int vx = o.motion.vx, vy = o.motion.vy;
    const Bounds b = center_bounds(scene, o.radius);
    for (int f = 0; f < scene.frames; ++f) {
        if (f > 0) {
            switch (o.motion.kind) {
                case MotionKind::still: break;
                case MotionKind::translate:
                    x += vx;
                    y += vy;
                    break;
                case MotionKind::bounce:
                    x = reflect(x + vx, vx, b.lo_x, b.hi_x);
                    y = reflect(y + vy, vy, b.lo_y, b.hi_y);
                    break;
            }
        }
        path.emplace_back(x, y);
    }
    return path;
}

GeneratedSample render_scene(const SceneSpec& scene) {
    const int gh = scene.grid_height(), gw = scene.grid_width();
    const auto& colors = color_table();
    MaskTrajectory grid(scene.frames, gh, gw);
    for (const auto& o : scene.objects) {
        const auto path = object_path(o, scene);
        for (int f = 0; f < scene.frames; ++f) {
            const auto [px, py] = path[f];
            for (int dy = -o.radius; dy <= o.radius; ++dy) {
                for (int dx = -o.radius; dx <= o.radius; ++dx) {
                    const int x = px + dx, y = py + dy;
                    if (x < 0 || y < 0 || x >= gw || y >= gh) continue;
                    if (shape_covers(o.shape, o.radius, dx, dy)) grid.at(f, y, x) = o.object_id;
                }
            }
        }
    }

    GeneratedSample out;
    out.scene = scene;
    out.mask = MaskTrajectory(scene.frames, scene.height, scene.width);
    out.video = VideoClip(scene.frames, 3, scene.height, scene.width);
    std::vector<int> color_of(scene.objects.size() + 1, scene.background);
    for (const auto& o : scene.objects) {
        if (o.object_id < 1 || static_cast<std::size_t>(o.object_id) > scene.objects.size()) {
            throw GenerationError("object ids must be contiguous from 1");
        }
        color_of[o.object_id] = o.color;
    }
    for (int f = 0; f < scene.frames; ++f) {
        for (int y = 0; y < scene.height; ++y) {
            for (int x = 0; x < scene.width; ++x) {
                const int32_t l = grid.at(f, y / scene.cell, x / scene.cell);
                out.mask.at(f, y, x) = l;
                const Rgb& rgb = colors.at(color_of[l]).rgb;
                for (int c = 0; c < 3; ++c) out.video.at(f, c, y, x) = rgb[c];
            }
        }
    }
    return out;
}

GeneratedSample generate_scene(uint64_t seed, const GeneratorConfig& config) {
    config.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    SceneSpec scene;
    scene.seed = seed;
    scene.height = config.height;
    scene.width = config.width;
    scene.frames = config.frames;
    scene.cell = config.cell;
    scene.margin = config.margin;

    const int palette_size = static_cast<int>(color_table().size());
    scene.background = uniform(0, palette_size - 1);
    const int count = uniform(config.min_objects, config.max_objects);
    std::vector<uint8_t> color_used(palette_size, 0);
    color_used[scene.background] = 1;
    std::vector<uint8_t> occupied(static_cast<std::size_t>(scene.grid_height()) * scene.grid_width(), 0);
    std::discrete_distribution<int> motion_pick(
        {config.motion.still, config.motion.translate, config.motion.bounce});

    for (int id = 1; id <= count; ++id) {
        bool placed = false;
        for (int attempt = 0; attempt < config.max_attempts && !placed; ++attempt) {
            ObjectSpec o;
            o.object_id = id;
            o.shape = static_cast<Shape>(uniform(0, 2));
            o.radius = uniform(config.min_radius, config.max_radius);
            const auto& nouns = noun_choices(o.shape);
            o.noun = config.noun_aliases ? nouns[uniform(0, static_cast<int>(nouns.size()) - 1)] : nouns[0];
            do {
                o.color = uniform(0, palette_size - 1);
            } while (color_used[o.color]);
            o.motion.kind = static_cast<MotionKind>(motion_pick(rng));
            if (o.motion.kind != MotionKind::still) {
                do {
                    o.motion.vx = uniform(-config.max_speed, config.max_speed);
                    o.motion.vy = uniform(-config.max_speed, config.max_speed);
                } while (o.motion.vx == 0 && o.motion.vy == 0);
            }
            const Bounds b = center_bounds(scene, o.radius);
            if (b.hi_x < b.lo_x || b.hi_y < b.lo_y) continue;
            if (o.motion.kind == MotionKind::bounce &&
                (std::abs(o.motion.vx) > b.hi_x - b.lo_x || std::abs(o.motion.vy) > b.hi_y - b.lo_y)) {
                continue;
            }
            o.cx = uniform(b.lo_x, b.hi_x);
            o.cy = uniform(b.lo_y, b.hi_y);
            if (!path_inside(object_path(o, scene), b)) continue;
            const auto cells = frame0_cells(o);
            const bool overlaps = std::any_of(cells.begin(), cells.end(), [&](const auto& c) {
                return occupied[static_cast<std::size_t>(c.second) * scene.grid_width() + c.first] != 0;
            });
            if (overlaps) continue;
            for (const auto& c : cells) occupied[static_cast<std::size_t>(c.second) * scene.grid_width() + c.first] = 1;
            color_used[o.color] = 1;
            scene.objects.push_back(o);
            placed = true;
        }
        if (!placed) {
            throw GenerationError("seed " + std::to_string(seed) + ": could not place object " +
                                  std::to_string(id) + " after " + std::to_string(config.max_attempts) +
                                  " attempts");
        }
    }
    return render_scene(scene);
}

std::array<double, 2> analytic_centroid(const ObjectSpec& o, const SceneSpec& scene, int frame) {
    const auto [px, py] = object_path(o, scene).at(frame);
    double sx = 0.0, sy = 0.0;
    int n = 0;
    for (int dy = -o.radius; dy <= o.radius; ++dy) {
        for (int dx = -o.radius; dx <= o.radius; ++dx) {
            if (!shape_covers(o.shape, o.radius, dx, dy)) continue;
            sx += px + dx;
            sy += py + dy;
            ++n;
        }
    }
    // a grid cell g spans pixels [g * cell, g * cell + cell - 1]
    const double half = (scene.cell - 1) / 2.0;
    return {sx / n * scene.cell + half, sy / n * scene.cell + half};
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : s.objects) {
        objects.push_back({{"object_id", o.object_id},
                           {"shape", shape_name(o.shape)},
                           {"color", o.color},
                           {"radius", o.radius},
                           {"cx", o.cx},
                           {"cy", o.cy},
                           {"motion", motion_name(o.motion.kind)},
                           {"vx", o.motion.vx},
                           {"vy", o.motion.vy},
                           {"noun", o.noun}});
    }
    j = {{"seed", s.seed},   {"height", s.height}, {"width", s.width},           {"frames", s.frames},
         {"cell", s.cell},   {"margin", s.margin}, {"background", s.background}, {"objects", objects}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
    s.seed = j.at("seed").get<uint64_t>();
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.frames = j.at("frames").get<int>();
    s.cell = j.value("cell", 1);
    s.margin = j.value("margin", 1);
    s.background = j.at("background").get<int>();
    s.objects.clear();
    for (const auto& jo : j.at("objects")) {
        ObjectSpec o;
        o.object_id = jo.at("object_id").get<int>();
        o.shape = shape_from_name(jo.at("shape").get<std::string>());
        o.color = jo.at("color").get<int>();
        o.radius = jo.at("radius").get<int>();
        o.cx = jo.at("cx").get<int>();
        o.cy = jo.at("cy").get<int>();
        o.motion.kind = motion_from_name(jo.at("motion").get<std::string>());
        o.motion.vx = jo.value("vx", 0);
        o.motion.vy = jo.value("vy", 0);
        o.noun = jo.value("noun", std::string(shape_name(o.shape)));
        s.objects.push_back(o);
    }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"height", c.height},
         {"width", c.width},
         {"frames", c.frames},
         {"cell", c.cell},
         {"margin", c.margin},
         {"min_objects", c.min_objects},
         {"max_objects", c.max_objects},
         {"min_radius", c.min_radius},
         {"max_radius", c.max_radius},
         {"max_speed", c.max_speed},
         {"motion_weights",
          {{"static", c.motion.still}, {"translate", c.motion.translate}, {"bounce", c.motion.bounce}}},
         {"noun_aliases", c.noun_aliases},
         {"max_attempts", c.max_attempts}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    const GeneratorConfig d;
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
    c.frames = j.value("frames", d.frames);
    c.cell = j.value("cell", d.cell);
    c.margin = j.value("margin", d.margin);
    c.min_objects = j.value("min_objects", d.min_objects);
    c.max_objects = j.value("max_objects", d.max_objects);
    c.min_radius = j.value("min_radius", d.min_radius);
    c.max_radius = j.value("max_radius", d.max_radius);
    c.max_speed = j.value("max_speed", d.max_speed);
    if (j.contains("motion_weights")) {
        const auto& w = j.at("motion_weights");
        c.motion.still = w.value("static", d.motion.still);
        c.motion.translate = w.value("translate", d.motion.translate);
        c.motion.bounce = w.value("bounce", d.motion.bounce);
    }
    c.noun_aliases = j.value("noun_aliases", d.noun_aliases);
    c.max_attempts = j.value("max_attempts", d.max_attempts);
}

}  // namespace maskvid
