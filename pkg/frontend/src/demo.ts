/** Bundled demo scene: a 64x64 five-object canvas from the shape world. */
export const DEMO_IMAGE_B64 =
  "iVBORw0KGgoAAAANSUhEUgAAAEAAAABACAIAAAAlC+aJAAABXUlEQVR4nO2ZKxLCMBCGWwY0HsEFUFVoFKdC9VQoNAfgAgh8TQ0iCJhMpkk2SfPYTdlPpYVp/38feUArhGhqZoUtIJZCBsa+G/sux5M5A9iUMCCLJ0cVcQawYQMuJnWfvA3W+q3zMEQ+9LrdRj7BHy4hEGPBpK0izgA2bMAOUOsJ28AwjaLT9nc5Fpcj/GVaBlTp6h3ARvU90NI5E+vhV7ElofoMsAFsivfAc/cb7F8GNZY2AGahgtOolK5emmwEUSoDE/UqmoeghYyigSCKNDGg3vmpi+pnofwGfAIckQTOADZsABs2gA0bwMZ3L/S+PeR4czqEvcS5TkVsh7wyoKrXL3FxGzDKDfMAB7iC3WhOHAaASKdJQvSJrOCR8qsVPBPPoPhPi4l0S5beA/RZugFg0Q1ej/Ow9Aw0lkgTCX/jmYGJXDrqG1J/cMzjD3qAOGwAGzaADRvAhg1g8wElAGVmjsfvcgAAAABJRU5ErkJggg==";

export const DEMO_WIDTH = 64;
export const DEMO_HEIGHT = 64;

export const DEMO_IMAGE_URI = `data:image/png;base64,${DEMO_IMAGE_B64}`;
