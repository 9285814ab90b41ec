#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maskvid/maskops.hpp"
#include "maskvid/types.hpp"

namespace maskvid {

enum class Shape { circle, square, triangle };
enum class MotionKind { still, translate, bounce };

/// Motion law; velocities are in grid cells per frame (pixels when cell == 1).
struct Motion {
    MotionKind kind = MotionKind::still;
    int vx = 0;
    int vy = 0;

    bool operator==(const Motion&) const = default;
};

/// One object of a scene. Geometry is expressed in grid units (see SceneSpec::cell).
struct ObjectSpec {
    int object_id = 1;
    Shape shape = Shape::circle;
    int color = 2;   ///< index into color_table()
    int radius = 2;  ///< footprint spans 2 * radius + 1 grid cells
    int cx = 0;      ///< frame-0 center column
    int cy = 0;      ///< frame-0 center row
    Motion motion;
    std::string noun;  ///< word used in prompts; defaults to the shape name

    /// Footprint extent in pixels for a given cell size.
    int size_px(int cell) const { return (2 * radius + 1) * cell; }
    bool operator==(const ObjectSpec&) const = default;
};

struct SceneSpec {
    uint64_t seed = 0;
    int height = 32;
    int width = 32;
    int frames = 8;
    int cell = 1;    ///< render granularity in pixels; the scene is drawn on a (H/cell) x (W/cell) grid
    int margin = 1;  ///< minimum distance in pixels between any object pixel and the canvas edge
    int background = 0;
    std::vector<ObjectSpec> objects;

    int grid_height() const { return height / cell; }
    int grid_width() const { return width / cell; }
    bool operator==(const SceneSpec&) const = default;
};

struct NamedColor {
    std::string name;
    Rgb rgb;
};

/// Appearance colors available to objects and backgrounds.
const std::vector<NamedColor>& color_table();

const char* shape_name(Shape s);
Shape shape_from_name(const std::string& name);
const char* motion_name(MotionKind k);
MotionKind motion_from_name(const std::string& name);

struct MotionWeights {
    double still = 0.2;
    double translate = 0.5;
    double bounce = 0.3;
};

struct GeneratorConfig {
    int height = 32;
    int width = 32;
    int frames = 8;
    int cell = 1;
    int margin = 1;
    int min_objects = 1;
    int max_objects = 3;  ///< L_max
    int min_radius = 2;
    int max_radius = 5;
    int max_speed = 2;
    MotionWeights motion;
    bool noun_aliases = true;  ///< allow "ball", "box", "kite" in place of shape names
    int max_attempts = 200;

    void validate() const;
};

struct GeneratedSample {
    VideoClip video;
    MaskTrajectory mask;
    SceneSpec scene;
};

/// Pure function of (seed, config).
GeneratedSample generate_scene(uint64_t seed, const GeneratorConfig& config);

/// Rasterizes a scene: later-listed objects draw over earlier ones, hard edges only.
GeneratedSample render_scene(const SceneSpec& scene);

/// Per-frame object centers in grid units, following the object's motion law.
std::vector<std::pair<int, int>> object_path(const ObjectSpec& object, const SceneSpec& scene);

/// True when grid offset (dx, dy) from the center is covered by the shape.
bool shape_covers(Shape shape, int radius, int dx, int dy);

/// Pixel-space centroid (x, y) of the object's unoccluded footprint at a frame.
std::array<double, 2> analytic_centroid(const ObjectSpec& object, const SceneSpec& scene, int frame);

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

}  // namespace maskvid
