import numpy as np
import pytest
import shapely

from omnidrl.domain.exceptions import DatasetError
from omnidrl.domain.models import Scene
from omnidrl.service.metrics import region_from_box
from omnidrl.service.renderer import OmniImage, gt_box, pedestrian_mask, pixel_grid, render_scene


class TestRenderScene:
    def test_image_matches_intrinsics(self, scene, small_camera):
        image = render_scene(scene, small_camera)
        assert image.pixels.shape == (128, 128, 3)
        assert image.pixels.dtype == np.uint8

    def test_rendering_is_deterministic(self, small_camera):
        scene = Scene(rho=2.5, beta=4.0, noise_std=3.0, seed=17)
        np.testing.assert_array_equal(render_scene(scene, small_camera).pixels, render_scene(scene, small_camera).pixels)

    def test_noise_depends_on_the_scene_seed(self, small_camera):
        a = render_scene(Scene(noise_std=3.0, seed=1), small_camera)
        b = render_scene(Scene(noise_std=3.0, seed=2), small_camera)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_light_scales_the_image(self, scene, small_camera):
        dim = render_scene(scene.model_copy(update={"light": 0.5}), small_camera)
        bright = render_scene(scene, small_camera)
        assert dim.pixels.mean() < bright.pixels.mean()

    def test_image_shape_must_match_intrinsics(self, small_camera):
        with pytest.raises(ValueError):
            OmniImage(pixels=np.zeros((10, 10, 3), dtype=np.uint8), cam=small_camera)

    def test_pixel_grid(self, small_camera):
        grid = pixel_grid(small_camera)
        assert grid.shape == (128, 128, 2)
        np.testing.assert_array_equal(grid[3, 5], [5.0, 3.0])


class TestPedestrian:
    @pytest.mark.parametrize("beta", [0.0, 1.3, 3.5, 5.9])
    def test_silhouette_lies_inside_the_ground_truth_region(self, small_camera, beta):
        scene = Scene(rho=2.0, beta=beta, width=0.5, height=1.7)
        mask = pedestrian_mask(scene, small_camera)
        v, u = np.nonzero(mask)
        region = region_from_box(gt_box(scene), small_camera)

        assert mask.sum() > 20
        assert np.all(shapely.contains_xy(region.polygon.buffer(1.0), u.astype(float), v.astype(float)))

    def test_silhouette_fills_the_ground_truth_region(self, small_camera, scene):
        mask = pedestrian_mask(scene, small_camera)
        region = region_from_box(gt_box(scene), small_camera)
        assert mask.sum() == pytest.approx(region.area, rel=0.2)

    def test_ground_truth_box_stands_on_the_floor(self, scene):
        box = gt_box(scene)
        assert box.z == -scene.camera_height
        assert (box.rho, box.beta, box.w, box.h) == (scene.rho, scene.beta, scene.width, scene.height)

    def test_negative_scene_has_no_pedestrian(self, small_camera):
        scene = Scene(has_pedestrian=False)
        assert not pedestrian_mask(scene, small_camera).any()
        with pytest.raises(DatasetError):
            gt_box(scene)

    def test_pedestrian_changes_the_image(self, small_camera, scene):
        empty = render_scene(scene.model_copy(update={"has_pedestrian": False}), small_camera)
        assert not np.array_equal(empty.pixels, render_scene(scene, small_camera).pixels)
